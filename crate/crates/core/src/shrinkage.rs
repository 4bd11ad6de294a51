//! Synthetic Bradley-Terry laboratory.
//!
//! Pairs are described by their feature difference `x = phi(y_w) - phi(y_l)`
//! and labelled `+1` with probability `sigmoid(<x, w*> + zeta)`, where `zeta`
//! is exogenous noise. Fitting a logistic model to such labels shrinks the
//! estimate toward zero as the noise grows; refitting on the pairs with the
//! largest realized margins inflates it again. This module generates the data,
//! fits the model, and evaluates the first-order condition of the fit.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::{par, sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLaw {
    #[default]
    StandardNormal,
    /// Uniform on the unit ball.
    UniformBall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLaw {
    #[default]
    Gaussian,
    /// `+-sigma` with equal probability.
    Rademacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub omega_star: Vec<f64>,
    pub noise_sigma: f64,
    pub n: usize,
    pub seed: u64,
    pub feature_law: FeatureLaw,
    pub noise_law: NoiseLaw,
}

impl SyntheticConfig {
    pub fn new(omega_star: Vec<f64>, noise_sigma: f64, n: usize, seed: u64) -> Self {
        SyntheticConfig {
            dim: omega_star.len(),
            omega_star,
            noise_sigma,
            n,
            seed,
            feature_law: FeatureLaw::StandardNormal,
            noise_law: NoiseLaw::Gaussian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.omega_star.len() != self.dim {
            return Err(Error::param(format!(
                "omega_star has {} entries for dim {}",
                self.omega_star.len(),
                self.dim
            )));
        }
        if self.n == 0 {
            return Err(Error::param("n must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::param("noise_sigma must be finite and >= 0"));
        }
        if self.omega_star.iter().any(|w| !w.is_finite()) || norm2(&self.omega_star) == 0.0 {
            return Err(Error::param("omega_star must be finite and nonzero"));
        }
        Ok(())
    }
}

/// Row-major `n x dim` feature differences with their noise and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub dim: usize,
    pub delta_phi: Vec<f64>,
    pub zeta: Vec<f64>,
    /// `+1` when the first response is preferred, `-1` otherwise.
    pub label: Vec<f64>,
}

impl SyntheticBatch {
    pub fn from_parts(
        dim: usize,
        delta_phi: Vec<f64>,
        zeta: Vec<f64>,
        label: Vec<f64>,
    ) -> Result<Self> {
        let n = label.len();
        if dim == 0 || delta_phi.len() != n * dim || zeta.len() != n {
            return Err(Error::param("batch dimensions disagree"));
        }
        if label.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::param("labels must be +1 or -1"));
        }
        Ok(SyntheticBatch {
            dim,
            delta_phi,
            zeta,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.delta_phi[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> SyntheticBatch {
        SyntheticBatch {
            dim: self.dim,
            delta_phi: indices
                .iter()
                .flat_map(|&i| self.row(i).iter().copied())
                .collect(),
            zeta: indices.iter().map(|&i| self.zeta[i]).collect(),
            label: indices.iter().map(|&i| self.label[i]).collect(),
        }
    }

    /// Every feature row multiplied by `c`.
    pub fn scaled(&self, c: f64) -> SyntheticBatch {
        SyntheticBatch {
            delta_phi: self.delta_phi.iter().map(|x| x * c).collect(),
            ..self.clone()
        }
    }

    /// Noisy reward margin `<x_i, w*> + zeta_i` of every row.
    pub fn noisy_margins(&self, omega_star: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| dot(self.row(i), omega_star) + self.zeta[i])
            .collect()
    }
}

fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn draw_labels(
    omega_star: &[f64],
    delta_phi: &[f64],
    zeta: &[f64],
    dim: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = stream_rng(seed, Stream::Labels);
    zeta.iter()
        .enumerate()
        .map(|(i, z)| {
            let p = sigmoid(dot(&delta_phi[i * dim..(i + 1) * dim], omega_star) + z);
            if rng.random::<f64>() < p {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

/// Draw a batch. Features, noise and labels come from separate streams, so
/// batches generated with different `noise_sigma` share their features and
/// standardized noise.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticBatch> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut feat_rng = stream_rng(cfg.seed, Stream::Features);
    let mut delta_phi = Vec::with_capacity(cfg.n * d);
    for _ in 0..cfg.n {
        match cfg.feature_law {
            FeatureLaw::StandardNormal => {
                delta_phi.extend((0..d).map(|_| std_normal(&mut feat_rng)));
            }
            FeatureLaw::UniformBall => {
                let dir: Vec<f64> = (0..d).map(|_| std_normal(&mut feat_rng)).collect();
                let len = norm2(&dir).max(f64::MIN_POSITIVE);
                let radius = feat_rng.random::<f64>().powf(1.0 / d as f64);
                delta_phi.extend(dir.iter().map(|x| x / len * radius));
            }
        }
    }
    let mut noise_rng = stream_rng(cfg.seed, Stream::Noise);
    let zeta: Vec<f64> = (0..cfg.n)
        .map(|_| {
            let z = match cfg.noise_law {
                NoiseLaw::Gaussian => std_normal(&mut noise_rng),
                NoiseLaw::Rademacher => {
                    if noise_rng.random::<bool>() {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            cfg.noise_sigma * z
        })
        .collect();
    let label = draw_labels(&cfg.omega_star, &delta_phi, &zeta, d, cfg.seed);
    Ok(SyntheticBatch {
        dim: d,
        delta_phi,
        zeta,
        label,
    })
}

/// Redraw only the label channel of `batch` with a new seed.
pub fn resample_labels(batch: &SyntheticBatch, omega_star: &[f64], seed: u64) -> Vec<f64> {
    draw_labels(omega_star, &batch.delta_phi, &batch.zeta, batch.dim, seed)
}

/// Mean negative log-likelihood and its gradient (unregularized).
fn nll_and_grad(batch: &SyntheticBatch, omega: &[f64]) -> (f64, Vec<f64>) {
    let d = batch.dim;
    let (loss, grad) = par::chunked_reduce(
        batch.len(),
        (0.0, vec![0.0; d]),
        |start, end| {
            let mut loss = 0.0;
            let mut grad = vec![0.0; d];
            for i in start..end {
                let x = batch.row(i);
                let y = batch.label[i];
                let s = y * dot(x, omega);
                loss += softplus(-s);
                let w = -y * sigmoid(-s);
                for (g, xj) in grad.iter_mut().zip(x) {
                    *g += w * xj;
                }
            }
            (loss, grad)
        },
        |(la, mut ga), (lb, gb)| {
            for (a, b) in ga.iter_mut().zip(&gb) {
                *a += b;
            }
            (la + lb, ga)
        },
    );
    let n = batch.len() as f64;
    (loss / n, grad.into_iter().map(|g| g / n).collect())
}

/// `mean_i softplus(-y_i <x_i, w>) + lambda ||w||^2`.
pub fn objective(batch: &SyntheticBatch, omega: &[f64], lambda: f64) -> f64 {
    nll_and_grad(batch, omega).0 + lambda * dot(omega, omega)
}

/// Gradient of [`objective`].
pub fn gradient(batch: &SyntheticBatch, omega: &[f64], lambda: f64) -> Vec<f64> {
    let (_, g) = nll_and_grad(batch, omega);
    g.iter()
        .zip(omega)
        .map(|(g, w)| g + 2.0 * lambda * w)
        .collect()
}

/// Sample first-order-condition gap at `omega`:
///
/// `mean[1{y=-1} sigmoid(a) x] - mean[1{y=+1} (1 - sigmoid(a)) x]`, with
/// `a = <x, w>`. The two terms are the empirical counterparts of the two
/// sides of the stationarity condition of the population loss; their
/// difference is the gradient of the mean negative log-likelihood.
pub fn foc_gap(batch: &SyntheticBatch, omega: &[f64]) -> Vec<f64> {
    let d = batch.dim;
    let (lhs, rhs) = par::chunked_reduce(
        batch.len(),
        (vec![0.0; d], vec![0.0; d]),
        |start, end| {
            let mut lhs = vec![0.0; d];
            let mut rhs = vec![0.0; d];
            for i in start..end {
                let x = batch.row(i);
                let a = dot(x, omega);
                let (side, w) = if batch.label[i] > 0.0 {
                    (&mut rhs, sigmoid(-a))
                } else {
                    (&mut lhs, sigmoid(a))
                };
                for (s, xj) in side.iter_mut().zip(x) {
                    *s += w * xj;
                }
            }
            (lhs, rhs)
        },
        |(mut la, mut ra), (lb, rb)| {
            la.iter_mut().zip(&lb).for_each(|(a, b)| *a += b);
            ra.iter_mut().zip(&rb).for_each(|(a, b)| *a += b);
            (la, ra)
        },
    );
    let n = batch.len() as f64;
    lhs.iter().zip(&rhs).map(|(l, r)| (l - r) / n).collect()
}

/// `||foc_gap||_inf`.
pub fn foc_residual(batch: &SyntheticBatch, omega: &[f64]) -> f64 {
    norm_inf(&foc_gap(batch, omega))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub omega_hat: Vec<f64>,
    /// Final regularized objective.
    pub loss: f64,
    /// Infinity norm of the regularized gradient at `omega_hat`.
    pub foc_residual: f64,
    pub iterations: usize,
    pub regularizer: f64,
    pub converged: bool,
    /// Unregularized fit whose iterate strictly separates the data; no finite
    /// minimizer exists.
    pub separable: bool,
}

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;
const MAX_STEP: f64 = 1e12;

/// Full-batch gradient descent from zero with Armijo backtracking. The trial
/// step of each iteration is the Barzilai-Borwein step from the previous
/// move.
pub fn fit_logistic(
    batch: &SyntheticBatch,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FitResult> {
    if batch.is_empty() {
        return Err(Error::param("cannot fit an empty batch"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::param("lambda must be finite and >= 0"));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::param("tol must be positive"));
    }
    let d = batch.dim;
    let eval = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (nll, g) = nll_and_grad(batch, w);
        let f = nll + lambda * dot(w, w);
        if !f.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at {w:?}")));
        }
        Ok((
            f,
            g.iter().zip(w).map(|(g, w)| g + 2.0 * lambda * w).collect(),
        ))
    };

    let mut omega = vec![0.0; d];
    let (mut f, mut g) = eval(&omega)?;
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < max_iter && norm_inf(&g) > tol {
        let g2 = dot(&g, &g);
        let mut t = step;
        let accepted = loop {
            let trial: Vec<f64> = omega.iter().zip(&g).map(|(w, g)| w - t * g).collect();
            let (ft, gt) = eval(&trial)?;
            let decrease = ARMIJO_C * t * g2;
            // below the resolution of f, fall back to requiring a smaller gradient
            let resolution = 4.0 * f64::EPSILON * f.abs().max(1.0);
            let flat_but_better =
                decrease <= resolution && ft <= f + resolution && norm_inf(&gt) < norm_inf(&g);
            if ft <= f - decrease || flat_but_better {
                break Some((trial, ft, gt));
            }
            t *= 0.5;
            if t < MIN_STEP {
                break None;
            }
        };
        iterations += 1;
        let Some((w, ft, gt)) = accepted else {
            // no further decrease representable
            break;
        };
        let s: Vec<f64> = w.iter().zip(&omega).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        step = if sy > 0.0 {
            (dot(&s, &s) / sy).min(MAX_STEP)
        } else {
            (2.0 * t).min(MAX_STEP)
        };
        omega = w;
        f = ft;
        g = gt;
    }
    let separable =
        lambda == 0.0 && (0..batch.len()).all(|i| batch.label[i] * dot(batch.row(i), &omega) > 0.0);
    let residual = norm_inf(&g);
    Ok(FitResult {
        omega_hat: omega,
        loss: f,
        foc_residual: residual,
        iterations,
        regularizer: lambda,
        converged: residual <= tol && !separable,
        separable,
    })
}

/// Indices of the top `frac` rows ranked by the labelled winner's noisy
/// margin `y_i (<x_i, w*> + zeta_i)`, returned in original row order.
pub fn top_margin_rows(
    batch: &SyntheticBatch,
    omega_star: &[f64],
    frac: f64,
) -> Result<Vec<usize>> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::param(format!(
            "select_frac must lie in (0, 1], got {frac}"
        )));
    }
    let n = batch.len();
    let keep = ((frac * n as f64).ceil() as usize).clamp(1, n);
    let margins = batch.noisy_margins(omega_star);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        (batch.label[b] * margins[b])
            .total_cmp(&(batch.label[a] * margins[a]))
            .then(a.cmp(&b))
    });
    order.truncate(keep);
    order.sort_unstable();
    Ok(order)
}

/// Fit on the full batch and on its top-`select_frac` margin subset.
pub fn inflation_experiment(
    cfg: &SyntheticConfig,
    select_frac: f64,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(FitResult, FitResult)> {
    let batch = generate(cfg)?;
    let rows = top_margin_rows(&batch, &cfg.omega_star, select_frac)?;
    let full = fit_logistic(&batch, lambda, tol, max_iter)?;
    let selected = if rows.len() == batch.len() {
        full.clone()
    } else {
        fit_logistic(&batch.subset(&rows), lambda, tol, max_iter)?
    };
    Ok((full, selected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub seed: u64,
    pub omega_hat: Vec<f64>,
    pub norm: f64,
    pub foc_residual: f64,
    pub converged: bool,
}

/// Fit one batch per `(sigma, seed)`; rows are sigma-major.
pub fn sigma_sweep(
    base: &SyntheticConfig,
    sigmas: &[f64],
    seeds: &[u64],
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(sigmas.len() * seeds.len());
    for &sigma in sigmas {
        for &seed in seeds {
            let cfg = SyntheticConfig {
                noise_sigma: sigma,
                seed,
                ..base.clone()
            };
            let fit = fit_logistic(&generate(&cfg)?, lambda, tol, max_iter)?;
            rows.push(SweepRow {
                sigma,
                seed,
                norm: norm2(&fit.omega_hat),
                omega_hat: fit.omega_hat,
                foc_residual: fit.foc_residual,
                converged: fit.converged,
            });
        }
    }
    Ok(rows)
}
