//! Tabular DPO.
//!
//! A policy is a table of logits over a finite prompt x response grid with
//! row-wise softmax. Training runs full-batch gradient descent on the mean
//! DPO loss against a frozen reference table. The trained table provides
//! implicit-reward margins for the selection pipeline, and the planted
//! instance at the bottom of this module reproduces how subsets chosen by
//! different strategies train.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_dataset, DEFAULT_EPS};
use crate::dataset::PreferenceRecord;
use crate::error::{Error, Result};
use crate::margin::{fit_projection, MarginVector, ProjectionParams};
use crate::rng::{stream_rng, substream_rng, Stream};
use crate::select::{select_bees, select_random, select_region, StrategyConfig, StrategyKind};
use crate::{sigmoid, softplus};

pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    prompts: usize,
    responses: usize,
    logits: Vec<f64>,
}

impl TabularPolicy {
    /// Uniform policy (all logits zero).
    pub fn uniform(prompts: usize, responses: usize) -> Self {
        TabularPolicy {
            prompts,
            responses,
            logits: vec![0.0; prompts * responses],
        }
    }

    pub fn from_logits(prompts: usize, responses: usize, logits: Vec<f64>) -> Result<Self> {
        if prompts == 0 || responses < 2 || logits.len() != prompts * responses {
            return Err(Error::param(format!(
                "{} logits for a {prompts}x{responses} grid",
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite {
                context: "policy logits".into(),
            });
        }
        Ok(TabularPolicy {
            prompts,
            responses,
            logits,
        })
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn responses(&self) -> usize {
        self.responses
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn row(&self, prompt: usize) -> &[f64] {
        &self.logits[prompt * self.responses..(prompt + 1) * self.responses]
    }

    pub fn row_mut(&mut self, prompt: usize) -> &mut [f64] {
        &mut self.logits[prompt * self.responses..(prompt + 1) * self.responses]
    }

    fn log_normalizer(&self, prompt: usize) -> f64 {
        let row = self.row(prompt);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }

    pub fn log_prob(&self, prompt: usize, response: usize) -> f64 {
        self.row(prompt)[response] - self.log_normalizer(prompt)
    }

    pub fn probs(&self, prompt: usize) -> Vec<f64> {
        let z = self.log_normalizer(prompt);
        self.row(prompt).iter().map(|l| (l - z).exp()).collect()
    }

    fn same_shape(&self, other: &TabularPolicy) -> Result<()> {
        if (self.prompts, self.responses) == (other.prompts, other.responses) {
            Ok(())
        } else {
            Err(Error::param("policy and reference shapes differ"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ToyPair {
    pub prompt: usize,
    pub winner: usize,
    pub loser: usize,
}

impl ToyPair {
    pub fn new(prompt: usize, winner: usize, loser: usize) -> Result<Self> {
        if winner == loser {
            return Err(Error::param("winner and loser must differ"));
        }
        Ok(ToyPair {
            prompt,
            winner,
            loser,
        })
    }

    pub fn swapped(self) -> Self {
        ToyPair {
            prompt: self.prompt,
            winner: self.loser,
            loser: self.winner,
        }
    }

    fn check(&self, policy: &TabularPolicy) -> Result<()> {
        if self.prompt >= policy.prompts
            || self.winner >= policy.responses
            || self.loser >= policy.responses
        {
            return Err(Error::param(format!(
                "pair {self:?} outside the policy grid"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Minibatch size; `None` trains full-batch.
    pub minibatch: Option<usize>,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: DEFAULT_BETA,
            lr: 1.0,
            epochs: 100,
            seed: 0,
            minibatch: None,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::param("beta must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr must be positive"));
        }
        if self.minibatch == Some(0) {
            return Err(Error::param("minibatch size must be positive"));
        }
        Ok(())
    }
}

/// Implicit-reward margin of `pair`, without the DPO temperature.
pub fn implicit_margin(policy: &TabularPolicy, reference: &TabularPolicy, pair: &ToyPair) -> f64 {
    let ratio = |r: usize| policy.log_prob(pair.prompt, r) - reference.log_prob(pair.prompt, r);
    ratio(pair.winner) - ratio(pair.loser)
}

/// `-log sigmoid(beta * m)`.
pub fn dpo_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pair: &ToyPair,
    beta: f64,
) -> f64 {
    softplus(-beta * implicit_margin(policy, reference, pair))
}

/// Accumulate `scale * d loss / d logits` into `grad` (a full logit table).
fn accumulate_grad(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pair: &ToyPair,
    beta: f64,
    scale: f64,
    grad: &mut [f64],
) {
    let m = implicit_margin(policy, reference, pair);
    let dloss_dm = -beta * sigmoid(-beta * m);
    // d m / d logit_j = (1[j=w] - pi_j) - (1[j=l] - pi_j)
    let base = pair.prompt * policy.responses;
    grad[base + pair.winner] += scale * dloss_dm;
    grad[base + pair.loser] -= scale * dloss_dm;
}

/// Gradient of [`dpo_loss`] with respect to every logit of `policy`.
pub fn dpo_loss_grad(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pair: &ToyPair,
    beta: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; policy.logits.len()];
    accumulate_grad(policy, reference, pair, beta, 1.0, &mut grad);
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// Mean DPO loss over the training pairs.
    pub loss: f64,
    /// Mean `beta * m` over the training pairs.
    pub margin: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
}

impl Trace {
    pub fn last(&self) -> Option<&TraceStep> {
        self.steps.last()
    }

    pub fn min_loss(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.loss)
            .fold(f64::INFINITY, f64::min)
    }

    /// `step,loss,margin` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,margin\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{}\n", s.step, s.loss, s.margin));
        }
        out
    }
}

fn batch_stats(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[ToyPair],
    beta: f64,
) -> TraceStep {
    let n = pairs.len() as f64;
    let (loss, margin) = pairs.iter().fold((0.0, 0.0), |(l, m), p| {
        let bm = beta * implicit_margin(policy, reference, p);
        (l + softplus(-bm), m + bm)
    });
    TraceStep {
        step: 0,
        loss: loss / n,
        margin: margin / n,
    }
}

/// Gradient descent on the mean DPO loss. The trace holds the batch means
/// before the first update and after each epoch.
pub fn train(
    policy: &mut TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[ToyPair],
    cfg: &DpoConfig,
) -> Result<Trace> {
    cfg.validate()?;
    policy.same_shape(reference)?;
    if pairs.is_empty() {
        return Err(Error::param("no training pairs"));
    }
    for p in pairs {
        p.check(policy)?;
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle);
    let batch_size = cfg.minibatch.unwrap_or(pairs.len()).min(pairs.len());
    let mut grad = vec![0.0; policy.logits.len()];

    let mut steps = vec![batch_stats(policy, reference, pairs, cfg.beta)];
    for epoch in 1..=cfg.epochs {
        if cfg.minibatch.is_some() {
            order.shuffle(&mut shuffle_rng);
        }
        for chunk in order.chunks(batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                accumulate_grad(policy, reference, &pairs[i], cfg.beta, scale, &mut grad);
            }
            for (l, g) in policy.logits.iter_mut().zip(&grad) {
                *l -= cfg.lr * g;
            }
        }
        let mut stats = batch_stats(policy, reference, pairs, cfg.beta);
        if !stats.loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite DPO loss at epoch {epoch}"
            )));
        }
        stats.step = epoch;
        steps.push(stats);
    }
    Ok(Trace { steps })
}

/// Implicit-reward margin of every pair.
pub fn extract_implicit_margins(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[ToyPair],
) -> Vec<(ToyPair, f64)> {
    pairs
        .iter()
        .map(|p| (*p, implicit_margin(policy, reference, p)))
        .collect()
}

/// Policy whose logits are the product of prompt and response factors of
/// rank `rank`: a small stand-in model for seed training.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPolicy {
    pub rank: usize,
    prompt_factors: Vec<f64>,
    response_factors: Vec<f64>,
    prompts: usize,
    responses: usize,
}

impl LowRankPolicy {
    /// Small random factors drawn from the `init` stream of `seed`.
    pub fn random(prompts: usize, responses: usize, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 || prompts == 0 || responses < 2 {
            return Err(Error::param(
                "low-rank policy needs rank >= 1 and a nonempty grid",
            ));
        }
        let mut rng = stream_rng(seed, Stream::Init);
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        Ok(LowRankPolicy {
            rank,
            prompt_factors: (0..prompts * rank)
                .map(|_| normal.sample(&mut rng))
                .collect(),
            response_factors: (0..responses * rank)
                .map(|_| normal.sample(&mut rng))
                .collect(),
            prompts,
            responses,
        })
    }

    pub fn to_tabular(&self) -> TabularPolicy {
        let r = self.rank;
        let logits = (0..self.prompts)
            .flat_map(|p| {
                (0..self.responses).map(move |y| {
                    (0..r)
                        .map(|k| self.prompt_factors[p * r + k] * self.response_factors[y * r + k])
                        .sum()
                })
            })
            .collect();
        TabularPolicy {
            prompts: self.prompts,
            responses: self.responses,
            logits,
        }
    }
}

/// DPO on the factors of a low-rank policy; the reference is its initial
/// table.
pub fn train_low_rank(
    policy: &mut LowRankPolicy,
    pairs: &[ToyPair],
    cfg: &DpoConfig,
) -> Result<(TabularPolicy, Trace)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::param("no training pairs"));
    }
    let reference = policy.to_tabular();
    for p in pairs {
        p.check(&reference)?;
    }
    let r = policy.rank;
    let mut steps = vec![batch_stats(&reference, &reference, pairs, cfg.beta)];
    for epoch in 1..=cfg.epochs {
        let table = policy.to_tabular();
        let mut grad = vec![0.0; table.logits.len()];
        let scale = 1.0 / pairs.len() as f64;
        for p in pairs {
            accumulate_grad(&table, &reference, p, cfg.beta, scale, &mut grad);
        }
        let mut g_prompt = vec![0.0; policy.prompt_factors.len()];
        let mut g_resp = vec![0.0; policy.response_factors.len()];
        for p in 0..policy.prompts {
            for y in 0..policy.responses {
                let g = grad[p * policy.responses + y];
                if g == 0.0 {
                    continue;
                }
                for k in 0..r {
                    g_prompt[p * r + k] += g * policy.response_factors[y * r + k];
                    g_resp[y * r + k] += g * policy.prompt_factors[p * r + k];
                }
            }
        }
        for (f, g) in policy.prompt_factors.iter_mut().zip(&g_prompt) {
            *f -= cfg.lr * g;
        }
        for (f, g) in policy.response_factors.iter_mut().zip(&g_resp) {
            *f -= cfg.lr * g;
        }
        let mut stats = batch_stats(&policy.to_tabular(), &reference, pairs, cfg.beta);
        if !stats.loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite DPO loss at epoch {epoch}"
            )));
        }
        stats.step = epoch;
        steps.push(stats);
    }
    Ok((reference, Trace { steps }))
}

/// Role of a planted record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedKind {
    /// Correctly labelled pair with a wide utility gap.
    Clear,
    /// Wide-gap pair whose label was flipped; the reward model still sees
    /// the true ordering.
    Flipped,
    /// Adjacent-utility pair, labelled both ways by different annotators.
    NearTie,
    /// Mid-utility pair labelled against the utility order that the reward
    /// model nonetheless scores as a wide win.
    Fooled,
}

/// Parameters of the planted instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub prompts: usize,
    pub responses: usize,
    /// Minimum utility gap of clear and flipped pairs.
    pub clear_gap: usize,
    /// Records per clear comparison.
    pub clear_copies: usize,
    /// Flipped records per prompt.
    pub flipped_per_prompt: usize,
    /// Records per orientation of each near tie.
    pub tie_copies: usize,
    /// Near-tie comparisons per prompt.
    pub ties_per_prompt: usize,
    /// Fooled records per prompt.
    pub fooled_per_prompt: usize,
    /// Standard deviation of the external reward model's margin error.
    pub external_noise: f64,
    /// Fraction of records used for seed training.
    pub seed_fraction: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            prompts: 8,
            responses: 8,
            clear_gap: 4,
            clear_copies: 2,
            flipped_per_prompt: 10,
            tie_copies: 2,
            ties_per_prompt: 4,
            fooled_per_prompt: 2,
            external_noise: 0.25,
            seed_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRecord {
    pub id: String,
    #[serde(flatten)]
    pub pair: ToyPair,
    /// Unknown for pairs loaded from a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<PlantedKind>,
    pub external: f64,
}

/// A planted dataset: utilities are the response indices, so response `r`
/// of every prompt has utility `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedInstance {
    pub config: PlantedConfig,
    pub records: Vec<PlantedRecord>,
}

impl PlantedInstance {
    pub fn generate(config: &PlantedConfig) -> Result<Self> {
        let r = config.responses;
        if config.prompts == 0 || r < 4 || config.clear_gap == 0 || config.clear_gap >= r {
            return Err(Error::param("planted grid too small for the requested gap"));
        }
        if !(config.seed_fraction > 0.0 && config.seed_fraction < 1.0) {
            return Err(Error::param("seed_fraction must lie in (0, 1)"));
        }
        let mut rng = stream_rng(config.seed, Stream::Planted);
        let noise = Normal::new(0.0, config.external_noise.max(0.0))
            .map_err(|e| Error::param(e.to_string()))?;
        let wide: Vec<(usize, usize)> = (0..r)
            .flat_map(|w| (0..r).map(move |l| (w, l)))
            .filter(|(w, l)| w > l && w - l >= config.clear_gap)
            .collect();
        let max_gap = (r - 1) as f64;
        let mut records = Vec::new();
        let push = |records: &mut Vec<PlantedRecord>, pair: ToyPair, kind, external: f64| {
            let id = format!("p{:02}-{:04}", pair.prompt, records.len());
            records.push(PlantedRecord {
                id,
                pair,
                kind: Some(kind),
                external,
            });
        };
        for p in 0..config.prompts {
            for &(w, l) in &wide {
                for _ in 0..config.clear_copies {
                    let ext = (w - l) as f64 + noise.sample(&mut rng);
                    push(
                        &mut records,
                        ToyPair {
                            prompt: p,
                            winner: w,
                            loser: l,
                        },
                        PlantedKind::Clear,
                        ext,
                    );
                }
            }
            for _ in 0..config.flipped_per_prompt {
                let (w, l) = wide[rng.random_range(0..wide.len())];
                let ext = -((w - l) as f64) + noise.sample(&mut rng);
                push(
                    &mut records,
                    ToyPair {
                        prompt: p,
                        winner: l,
                        loser: w,
                    },
                    PlantedKind::Flipped,
                    ext,
                );
            }
            for _ in 0..config.ties_per_prompt {
                let a = rng.random_range(0..r - 1);
                for _ in 0..config.tie_copies {
                    for pair in [
                        ToyPair {
                            prompt: p,
                            winner: a + 1,
                            loser: a,
                        },
                        ToyPair {
                            prompt: p,
                            winner: a,
                            loser: a + 1,
                        },
                    ] {
                        let ext = (noise.sample(&mut rng) * 0.5).clamp(-0.9, 0.9);
                        push(&mut records, pair, PlantedKind::NearTie, ext);
                    }
                }
            }
            // mid-utility responses, ordered against utility
            let lo = r / 2 - 1;
            for _ in 0..config.fooled_per_prompt {
                let pair = ToyPair {
                    prompt: p,
                    winner: lo,
                    loser: lo + 1,
                };
                let ext = max_gap + noise.sample(&mut rng).abs();
                push(&mut records, pair, PlantedKind::Fooled, ext);
            }
        }
        Ok(PlantedInstance {
            config: config.clone(),
            records,
        })
    }

    /// Wrap externally supplied pairs; `config` provides the grid, the seed
    /// fraction and the seed.
    pub fn from_records(config: &PlantedConfig, records: Vec<PlantedRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::param("no pairs"));
        }
        if !(config.seed_fraction > 0.0 && config.seed_fraction < 1.0) {
            return Err(Error::param("seed_fraction must lie in (0, 1)"));
        }
        let grid = TabularPolicy::uniform(config.prompts, config.responses);
        let mut ids = std::collections::BTreeSet::new();
        for r in &records {
            r.pair.check(&grid)?;
            if r.pair.winner == r.pair.loser {
                return Err(Error::InvalidRecord {
                    id: r.id.clone(),
                    message: "winner and loser must differ".into(),
                });
            }
            if !r.external.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("external margin of `{}`", r.id),
                });
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::DuplicateId {
                    id: r.id.clone(),
                    line: 0,
                });
            }
        }
        Ok(PlantedInstance {
            config: config.clone(),
            records,
        })
    }

    pub fn pairs(&self) -> Vec<ToyPair> {
        self.records.iter().map(|r| r.pair).collect()
    }

    /// Random seed subset (by index) used for seed training.
    pub fn seed_indices(&self) -> Vec<usize> {
        let n = self.records.len();
        let take = ((self.config.seed_fraction * n as f64).round() as usize).clamp(1, n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(self.config.seed, Stream::SeedSplit));
        idx.truncate(take);
        idx.sort_unstable();
        idx
    }

    /// Train on the seed subset from a uniform reference and attach external
    /// and implicit margins to every record.
    pub fn to_records(&self, seed_cfg: &DpoConfig) -> Result<Vec<PreferenceRecord>> {
        let pairs = self.pairs();
        let seed_pairs: Vec<ToyPair> = self.seed_indices().iter().map(|&i| pairs[i]).collect();
        let reference = TabularPolicy::uniform(self.config.prompts, self.config.responses);
        let mut policy = reference.clone();
        train(&mut policy, &reference, &seed_pairs, seed_cfg)?;
        Ok(self
            .records
            .iter()
            .map(|r| {
                let mut rec = PreferenceRecord::new(r.id.clone())
                    .with_margin("external", r.external)
                    .with_margin("implicit", implicit_margin(&policy, &reference, &r.pair));
                if let Some(kind) = r.kind {
                    rec.meta.insert("kind".into(), format!("{kind:?}"));
                }
                rec
            })
            .collect())
    }
}

/// Pearson correlation between implicit margins of a full-rank seed fit
/// and a rank-`rank` seed fit, over every record of `instance`.
pub fn weak_to_strong_correlation(
    instance: &PlantedInstance,
    seed_cfg: &DpoConfig,
    rank: usize,
) -> Result<Option<f64>> {
    let pairs = instance.pairs();
    let seed_pairs: Vec<ToyPair> = instance.seed_indices().iter().map(|&i| pairs[i]).collect();
    let reference = TabularPolicy::uniform(instance.config.prompts, instance.config.responses);
    let mut strong = reference.clone();
    train(&mut strong, &reference, &seed_pairs, seed_cfg)?;
    let mut weak = LowRankPolicy::random(
        instance.config.prompts,
        instance.config.responses,
        rank,
        instance.config.seed,
    )?;
    let (weak_ref, _) = train_low_rank(&mut weak, &seed_pairs, seed_cfg)?;
    let weak = weak.to_tabular();
    let a: Vec<f64> = pairs
        .iter()
        .map(|p| implicit_margin(&strong, &reference, p))
        .collect();
    let b: Vec<f64> = pairs
        .iter()
        .map(|p| implicit_margin(&weak, &weak_ref, p))
        .collect();
    crate::stats::pearson(&a, &b)
}

/// Trace of one strategy in [`dynamics_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTrace {
    pub strategy: StrategyKind,
    pub selected: usize,
    pub trace: Trace,
}

/// Select a subset per strategy and train a fresh policy on each.
///
/// `records` carry `external` and `implicit` margins and ids matching
/// `instance`. Region strategies read their configured source; `bees` fuses
/// both sources with projections fitted on the whole dataset.
pub fn dynamics_experiment(
    instance: &PlantedInstance,
    records: &[PreferenceRecord],
    strategies: &[StrategyConfig],
    train_cfg: &DpoConfig,
) -> Result<Vec<StrategyTrace>> {
    let pair_of: BTreeMap<&str, ToyPair> = instance
        .records
        .iter()
        .map(|r| (r.id.as_str(), r.pair))
        .collect();
    let mut out = Vec::with_capacity(strategies.len());
    for cfg in strategies {
        let selection = match cfg.kind {
            StrategyKind::Random => select_random(records, cfg.k, cfg.seed)?,
            StrategyKind::Bees => {
                let sources = vec!["external".to_string(), "implicit".to_string()];
                let params = ProjectionParams::default();
                let mut specs = BTreeMap::new();
                for s in &sources {
                    let ms = records
                        .iter()
                        .map(|r| r.margin(s))
                        .collect::<Result<Vec<_>>>()?;
                    specs.insert(s.clone(), fit_projection(&ms, s, &params)?);
                }
                let mvs = records
                    .iter()
                    .map(|r| MarginVector::from_record(r, &sources))
                    .collect::<Result<Vec<_>>>()?;
                let scores = aggregate_dataset(&mvs, &specs, DEFAULT_EPS)?;
                select_bees(&scores, &mvs, cfg.k, cfg.exclude_negative)?
            }
            _ => select_region(records, cfg)?,
        };
        let pairs = selection
            .selected_ids
            .iter()
            .map(|id| {
                pair_of
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::InvalidRecord {
                        id: id.clone(),
                        message: "selected id not in the planted instance".into(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let reference = TabularPolicy::uniform(instance.config.prompts, instance.config.responses);
        let mut policy = reference.clone();
        let trace = train(&mut policy, &reference, &pairs, train_cfg)?;
        out.push(StrategyTrace {
            strategy: cfg.kind,
            selected: pairs.len(),
            trace,
        });
    }
    Ok(out)
}

/// Everything needed to rerun the planted dynamics comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSetup {
    pub planted: PlantedConfig,
    pub seed_training: DpoConfig,
    pub training: DpoConfig,
    /// Subset size for every strategy.
    pub k: usize,
    pub base_seed: u64,
    pub replicates: u32,
}

impl Default for DynamicsSetup {
    fn default() -> Self {
        DynamicsSetup {
            planted: PlantedConfig::default(),
            seed_training: DpoConfig {
                lr: 10.0,
                epochs: 300,
                ..DpoConfig::default()
            },
            training: DpoConfig {
                lr: 100.0,
                epochs: 500,
                ..DpoConfig::default()
            },
            k: 64,
            base_seed: 7,
            replicates: 3,
        }
    }
}

impl DynamicsSetup {
    /// Random, P, Z and N on the external source, then BeeS.
    pub fn strategies(&self, replicate: u32) -> Vec<StrategyConfig> {
        let seed = replicate as u64;
        vec![
            StrategyConfig::new(StrategyKind::Random, self.k).with_seed(seed),
            StrategyConfig::region(StrategyKind::MarginP, "external", self.k),
            StrategyConfig::region(StrategyKind::MarginZ, "external", self.k).with_seed(seed),
            StrategyConfig::region(StrategyKind::MarginN, "external", self.k),
            StrategyConfig::new(StrategyKind::Bees, self.k),
        ]
    }

    /// One planted instance per replicate, each trained under every strategy.
    pub fn run(&self) -> Result<Vec<Vec<StrategyTrace>>> {
        (0..self.replicates)
            .map(|i| {
                let planted = PlantedConfig {
                    seed: replicate_seed(self.base_seed, i),
                    ..self.planted.clone()
                };
                let instance = PlantedInstance::generate(&planted)?;
                let records = instance.to_records(&self.seed_training)?;
                dynamics_experiment(&instance, &records, &self.strategies(i), &self.training)
            })
            .collect()
    }
}

/// Per-replicate seeds for repeated planted runs.
pub fn replicate_seed(base: u64, replicate: u32) -> u64 {
    substream_rng(base, Stream::Planted, replicate + 1).random()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> (TabularPolicy, TabularPolicy) {
        let reference = TabularPolicy::uniform(2, 3);
        (reference.clone(), reference)
    }

    #[test]
    fn loss_at_reference_is_log_two() {
        let (p, r) = grid();
        let pair = ToyPair::new(0, 0, 1).unwrap();
        assert!((dpo_loss(&p, &r, &pair, 0.1) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn small_beta_limit_is_log_two() {
        let r = TabularPolicy::uniform(1, 3);
        let p = TabularPolicy::from_logits(1, 3, vec![4.0, -2.0, 0.5]).unwrap();
        let pair = ToyPair::new(0, 0, 1).unwrap();
        assert!((dpo_loss(&p, &r, &pair, 1e-12) - std::f64::consts::LN_2).abs() < 1e-10);
    }

    #[test]
    fn one_step_descends() {
        let (mut p, r) = grid();
        let pair = ToyPair::new(1, 2, 0).unwrap();
        let before = dpo_loss(&p, &r, &pair, 0.1);
        let cfg = DpoConfig {
            epochs: 1,
            lr: 0.5,
            ..DpoConfig::default()
        };
        train(&mut p, &r, &[pair], &cfg).unwrap();
        assert!(dpo_loss(&p, &r, &pair, 0.1) < before);
    }

    #[test]
    fn single_pair_converges_in_the_right_direction() {
        let (mut p, r) = grid();
        let pair = ToyPair::new(0, 1, 2).unwrap();
        let trace = train(
            &mut p,
            &r,
            &[pair],
            &DpoConfig {
                lr: 5.0,
                epochs: 200,
                ..Default::default()
            },
        )
        .unwrap();
        let last = trace.last().unwrap();
        assert!(last.margin > 0.0);
        assert!(last.loss < std::f64::consts::LN_2);
        assert_eq!(trace.steps.len(), 201);
        assert!(implicit_margin(&p, &r, &pair) > 0.0);
    }

    #[test]
    fn contradictory_pairs_cancel() {
        let (mut p, r) = grid();
        let ab = ToyPair::new(0, 0, 1).unwrap();
        let ba = ab.swapped();
        let cfg = DpoConfig {
            lr: 1.0,
            epochs: 1,
            ..Default::default()
        };
        for _ in 0..20 {
            train(&mut p, &r, &[ab, ba, ToyPair::new(0, 0, 2).unwrap()], &cfg).unwrap();
            let ms = extract_implicit_margins(&p, &r, &[ab, ba]);
            assert_eq!(ms[0].1 + ms[1].1, 0.0);
        }
    }

    #[test]
    fn consistent_pairs_grow_margin_monotonically() {
        let r = TabularPolicy::uniform(2, 4);
        let mut p = r.clone();
        let pairs: Vec<_> = [
            (0, 3, 0),
            (0, 3, 1),
            (0, 2, 1),
            (0, 1, 0),
            (1, 2, 0),
            (1, 2, 3),
        ]
        .iter()
        .map(|&(x, w, l)| ToyPair::new(x, w, l).unwrap())
        .collect();
        let trace = train(
            &mut p,
            &r,
            &pairs,
            &DpoConfig {
                lr: 1e-2,
                epochs: 500,
                ..Default::default()
            },
        )
        .unwrap();
        for w in trace.steps.windows(2) {
            assert!(w[1].margin >= w[0].margin - 1e-9);
        }
    }

    #[test]
    fn untrained_margins_are_zero() {
        let (p, r) = grid();
        let pairs = [
            ToyPair::new(0, 0, 1).unwrap(),
            ToyPair::new(1, 2, 1).unwrap(),
        ];
        assert!(extract_implicit_margins(&p, &r, &pairs)
            .iter()
            .all(|(_, m)| *m == 0.0));
    }

    #[test]
    fn held_out_pair_follows_winner_gain() {
        // 2x3 grid: train (x0: y0 > y1), then look at (x0: y0 > y2)
        let (mut p, r) = grid();
        let trained = ToyPair::new(0, 0, 1).unwrap();
        train(
            &mut p,
            &r,
            &[trained],
            &DpoConfig {
                lr: 1.0,
                epochs: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let held_out = ToyPair::new(0, 0, 2).unwrap();
        let gain = |y: usize| p.log_prob(0, y) - r.log_prob(0, y);
        let m = implicit_margin(&p, &r, &held_out);
        assert!(gain(0) > 0.0);
        assert_eq!(m.signum(), (gain(0) - gain(2)).signum());
        assert!(m > 0.0);
        // the untouched prompt is unaffected
        assert_eq!(
            implicit_margin(&p, &r, &ToyPair::new(1, 0, 2).unwrap()),
            0.0
        );
    }

    #[test]
    fn rows_normalize() {
        let p = TabularPolicy::from_logits(2, 3, vec![700.0, -3.0, 2.0, 0.1, 0.2, 0.3]).unwrap();
        for x in 0..2 {
            assert!((p.probs(x).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let r = TabularPolicy::from_logits(2, 3, vec![0.3, -0.2, 0.1, 0.0, 0.5, -1.0]).unwrap();
        let mut rng = stream_rng(5, Stream::Init);
        for _ in 0..10 {
            let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = TabularPolicy::from_logits(2, 3, logits.clone()).unwrap();
            let pair = ToyPair::new(rng.random_range(0..2), 0, 2).unwrap();
            let g = dpo_loss_grad(&p, &r, &pair, 0.5);
            for j in 0..6 {
                let h = 1e-5;
                let mut up = logits.clone();
                let mut dn = logits.clone();
                up[j] += h;
                dn[j] -= h;
                let f = |l: Vec<f64>| {
                    dpo_loss(
                        &TabularPolicy::from_logits(2, 3, l).unwrap(),
                        &r,
                        &pair,
                        0.5,
                    )
                };
                let fd = (f(up) - f(dn)) / (2.0 * h);
                assert!(
                    (fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1e-4),
                    "{j}: {fd} vs {}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn row_shift_changes_nothing() {
        let r = TabularPolicy::uniform(1, 3);
        let p = TabularPolicy::from_logits(1, 3, vec![1.0, -0.5, 0.25]).unwrap();
        let mut shifted = p.clone();
        shifted.row_mut(0).iter_mut().for_each(|l| *l += 17.0);
        let pair = ToyPair::new(0, 0, 2).unwrap();
        assert!((dpo_loss(&p, &r, &pair, 0.1) - dpo_loss(&shifted, &r, &pair, 0.1)).abs() < 1e-12);
        assert!(
            (implicit_margin(&p, &r, &pair) - implicit_margin(&shifted, &r, &pair)).abs() < 1e-12
        );
        let (g, gs) = (
            dpo_loss_grad(&p, &r, &pair, 0.1),
            dpo_loss_grad(&shifted, &r, &pair, 0.1),
        );
        assert!(g.iter().zip(&gs).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn smaller_beta_keeps_wide_margins_trainable() {
        let r = TabularPolicy::uniform(1, 2);
        let p = TabularPolicy::from_logits(1, 2, vec![60.0, 0.0]).unwrap();
        let pair = ToyPair::new(0, 0, 1).unwrap();
        let norm = |beta| {
            dpo_loss_grad(&p, &r, &pair, beta)
                .iter()
                .map(|g: &f64| g.abs())
                .sum::<f64>()
        };
        assert!(norm(0.01) > norm(0.1));
    }

    #[test]
    fn minibatch_training_is_seeded() {
        let r = TabularPolicy::uniform(1, 4);
        let pairs: Vec<_> = (1..4).map(|w| ToyPair::new(0, w, 0).unwrap()).collect();
        let cfg = DpoConfig {
            minibatch: Some(1),
            epochs: 5,
            seed: 3,
            ..Default::default()
        };
        let (mut a, mut b) = (r.clone(), r.clone());
        assert_eq!(
            train(&mut a, &r, &pairs, &cfg).unwrap(),
            train(&mut b, &r, &pairs, &cfg).unwrap()
        );
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_inputs() {
        assert!(ToyPair::new(0, 1, 1).is_err());
        let (mut p, r) = grid();
        assert!(train(&mut p, &r, &[], &DpoConfig::default()).is_err());
        let bad = ToyPair {
            prompt: 5,
            winner: 0,
            loser: 1,
        };
        assert!(train(&mut p, &r, &[bad], &DpoConfig::default()).is_err());
        let cfg = DpoConfig {
            beta: 0.0,
            ..Default::default()
        };
        assert!(train(&mut p, &r, &[ToyPair::new(0, 0, 1).unwrap()], &cfg).is_err());
    }

    #[test]
    fn low_rank_training_moves_margins() {
        let mut lr = LowRankPolicy::random(3, 4, 2, 1).unwrap();
        let pairs = [
            ToyPair::new(0, 3, 0).unwrap(),
            ToyPair::new(1, 3, 1).unwrap(),
        ];
        let (reference, trace) = train_low_rank(
            &mut lr,
            &pairs,
            &DpoConfig {
                lr: 2.0,
                epochs: 200,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(trace.last().unwrap().margin > 0.0);
        let table = lr.to_tabular();
        assert!(pairs
            .iter()
            .all(|p| implicit_margin(&table, &reference, p) > 0.0));
    }

    #[test]
    fn weak_to_strong_correlation_is_defined() {
        let inst = PlantedInstance::generate(&PlantedConfig::default()).unwrap();
        let cfg = DynamicsSetup::default().seed_training;
        let rho = weak_to_strong_correlation(&inst, &cfg, 2).unwrap().unwrap();
        assert!((-1.0..=1.0).contains(&rho));
    }

    #[test]
    fn committed_fixture_matches_defaults() {
        let text = include_str!("../tests/fixtures/planted.json");
        let setup: DynamicsSetup = serde_json::from_str(text).unwrap();
        assert_eq!(setup, DynamicsSetup::default());
    }

    #[test]
    fn empty_strategy_list() {
        let inst = PlantedInstance::generate(&PlantedConfig::default()).unwrap();
        let recs = inst.to_records(&DpoConfig::default()).unwrap();
        assert!(
            dynamics_experiment(&inst, &recs, &[], &DpoConfig::default())
                .unwrap()
                .is_empty()
        );
    }
}
