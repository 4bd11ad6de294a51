//! Fusion of per-source preference probabilities.
//!
//! Under conditional independence of the sources the fused probability is
//! `prod p_i / (prod p_i + prod (1 - p_i))`, which equals
//! `sigmoid(sum logit(p_i))`. The log-odds form is what we compute; it does
//! not underflow for many sources. Probabilities are clamped to
//! `[eps, 1 - eps]` first so that a source sitting exactly on a projection
//! bound cannot produce `0 / 0`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margin::{project, MarginVector, ProjectionSpec};
use crate::{logit, par, sigmoid};

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedScore {
    pub record_id: String,
    /// Clamped per-source probabilities in the record's source order.
    pub per_source: Vec<(String, f64)>,
    pub fused: f64,
    /// `sum logit(p_i)`; strictly monotone in `fused`, kept for ranking
    /// where `fused` saturates.
    pub log_odds: f64,
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps < 0.5 {
        Ok(())
    } else {
        Err(Error::param(format!("eps must lie in (0, 0.5), got {eps}")))
    }
}

pub fn clamp_probs(ps: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_eps(eps)?;
    ps.iter()
        .map(|&p| {
            if (0.0..=1.0).contains(&p) {
                Ok(p.clamp(eps, 1.0 - eps))
            } else {
                Err(Error::param(format!("probability {p} outside [0, 1]")))
            }
        })
        .collect()
}

/// Log-odds of `p` clamped to `[eps, 1 - eps]`.
///
/// Probabilities above one half go through their (exactly representable)
/// complement, so `clamped_logit(1 - p) == -clamped_logit(p)` bit for bit
/// whenever `1 - p` is exact, including at the clamp bounds.
fn clamped_logit(p: f64, eps: f64) -> f64 {
    if p <= 0.5 {
        logit(p.max(eps))
    } else {
        -logit((1.0 - p).max(eps))
    }
}

fn check_probs(ps: &[f64]) -> Result<()> {
    match ps.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        Some(p) => Err(Error::param(format!("probability {p} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Summed log-odds of the clamped probabilities.
pub fn aggregate_log_odds(ps: &[f64], eps: f64) -> Result<f64> {
    check_eps(eps)?;
    check_probs(ps)?;
    if ps.is_empty() {
        return Err(Error::param("cannot aggregate an empty probability list"));
    }
    Ok(ps.iter().map(|&p| clamped_logit(p, eps)).sum())
}

/// Fused preference probability of independent sources.
pub fn aggregate(ps: &[f64], eps: f64) -> Result<f64> {
    aggregate_log_odds(ps, eps).map(sigmoid)
}

fn score_record(
    mv: &MarginVector,
    specs: &BTreeMap<String, ProjectionSpec>,
    eps: f64,
) -> Result<AggregatedScore> {
    let raw = mv
        .values
        .iter()
        .map(|(source, m)| {
            let spec = specs.get(source).ok_or_else(|| Error::MissingSpec {
                record_id: mv.record_id.clone(),
                source_name: source.clone(),
            })?;
            Ok(project(spec, *m))
        })
        .collect::<Result<Vec<_>>>()?;
    let clamped = clamp_probs(&raw, eps)?;
    let log_odds: f64 = raw.iter().map(|&p| clamped_logit(p, eps)).sum();
    Ok(AggregatedScore {
        record_id: mv.record_id.clone(),
        per_source: mv
            .values
            .iter()
            .zip(clamped)
            .map(|((s, _), p)| (s.clone(), p))
            .collect(),
        fused: sigmoid(log_odds),
        log_odds,
    })
}

/// Project and fuse every record. Output order follows input order.
pub fn aggregate_dataset(
    records: &[MarginVector],
    specs: &BTreeMap<String, ProjectionSpec>,
    eps: f64,
) -> Result<Vec<AggregatedScore>> {
    check_eps(eps)?;
    par::map_collect(records, |mv| score_record(mv, specs, eps))
        .into_iter()
        .collect()
}
