//! Reward margins and their projection onto preference probabilities.

use serde::{Deserialize, Serialize};

use crate::dataset::PreferenceRecord;
use crate::error::{Error, Result};

/// Default fixed lower bound of the projection.
pub const DEFAULT_LOWER: f64 = -2.0;
/// Default tail-count threshold for choosing the upper bound.
pub const DEFAULT_MIN_TAIL: usize = 30;

/// Policy and reference log-probabilities of the chosen (`w`) and rejected
/// (`l`) responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogprobBundle {
    pub theta_w: f64,
    pub ref_w: f64,
    pub theta_l: f64,
    pub ref_l: f64,
}

impl LogprobBundle {
    pub fn new(theta_w: f64, ref_w: f64, theta_l: f64, ref_l: f64) -> Self {
        LogprobBundle {
            theta_w,
            ref_w,
            theta_l,
            ref_l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta_w", self.theta_w),
            ("ref_w", self.ref_w),
            ("theta_l", self.theta_l),
            ("ref_l", self.ref_l),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("log-probability `{name}`"),
                });
            }
            if v > 0.0 {
                return Err(Error::param(format!(
                    "log-probability `{name}` = {v} is positive"
                )));
            }
        }
        Ok(())
    }

    /// The same pair with chosen and rejected swapped.
    pub fn swapped(&self) -> Self {
        LogprobBundle::new(self.theta_l, self.ref_l, self.theta_w, self.ref_w)
    }
}

fn finite(v: f64, context: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

/// Reward-model margin `r_w - r_l`.
pub fn external_margin(r_w: f64, r_l: f64) -> Result<f64> {
    Ok(finite(r_w, "chosen reward")? - finite(r_l, "rejected reward")?)
}

/// Implicit-reward margin `[log pi(w) - log ref(w)] - [log pi(l) - log ref(l)]`,
/// without the DPO temperature.
pub fn implicit_margin(bundle: &LogprobBundle) -> Result<f64> {
    let theta_w = finite(bundle.theta_w, "theta_w")?;
    let ref_w = finite(bundle.ref_w, "ref_w")?;
    let theta_l = finite(bundle.theta_l, "theta_l")?;
    let ref_l = finite(bundle.ref_l, "ref_l")?;
    Ok((theta_w - ref_w) - (theta_l - ref_l))
}

/// Clipped-linear map from one source's margin to a preference probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub source: String,
    pub lower: f64,
    pub upper: f64,
}

impl ProjectionSpec {
    pub fn new(source: impl Into<String>, lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) {
            return Err(Error::NonFinite {
                context: "projection bounds".into(),
            });
        }
        if lower >= upper {
            return Err(Error::param(format!(
                "projection needs lower < upper, got ({lower}, {upper})"
            )));
        }
        Ok(ProjectionSpec {
            source: source.into(),
            lower,
            upper,
        })
    }
}

/// `(clip(m, L, U) - L) / (U - L)`.
pub fn project(spec: &ProjectionSpec, m: f64) -> f64 {
    let clipped = m.clamp(spec.lower, spec.upper);
    (clipped - spec.lower) / (spec.upper - spec.lower)
}

/// Parameters of [`fit_projection`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionParams {
    pub lower: f64,
    /// Tail counts below this satisfy the first upper-bound condition.
    pub min_tail: usize,
    /// Enables the second condition: tail count below the tail width.
    pub tail_width_rule: bool,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        ProjectionParams {
            lower: DEFAULT_LOWER,
            min_tail: DEFAULT_MIN_TAIL,
            tail_width_rule: true,
        }
    }
}

impl ProjectionParams {
    /// Whether `upper` qualifies given `tail` samples in `[upper, max]`.
    pub fn upper_qualifies(&self, tail: usize, upper: f64, max: f64) -> bool {
        tail < self.min_tail || (self.tail_width_rule && (tail as f64) < max - upper)
    }
}

/// Fit the projection bounds for one margin source.
///
/// The lower bound is fixed. The upper bound scans the distinct observed
/// margins above the lower bound from the maximum downward and stops at the
/// last value that still satisfies
/// `#{m >= U} < min_tail  or  #{m >= U} < max - U`. When the maximum itself
/// fails both conditions (all mass piled at the top), the upper bound falls
/// back to the maximum.
pub fn fit_projection(
    margins: &[f64],
    source: &str,
    params: &ProjectionParams,
) -> Result<ProjectionSpec> {
    if margins.is_empty() {
        return Err(Error::DegenerateProjection {
            source_name: source.into(),
            message: "no margins".into(),
        });
    }
    if margins.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("margins of source `{source}`"),
        });
    }
    let mut sorted = margins.to_vec();
    sorted.sort_by(f64::total_cmp);
    let max = sorted[sorted.len() - 1];
    if max <= params.lower {
        return Err(Error::DegenerateProjection {
            source_name: source.into(),
            message: format!("all margins <= lower bound {}", params.lower),
        });
    }

    let tail_count = |u: f64| sorted.len() - sorted.partition_point(|&m| m < u);
    let mut upper = max;
    let mut idx = sorted.len();
    while idx > 0 {
        let candidate = sorted[idx - 1];
        if candidate <= params.lower {
            break;
        }
        if !params.upper_qualifies(tail_count(candidate), candidate, max) {
            break;
        }
        upper = candidate;
        // skip duplicates of this grid value
        idx = sorted.partition_point(|&m| m < candidate);
    }
    ProjectionSpec::new(source, params.lower, upper)
}

/// One record's margins for an ordered list of sources.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginVector {
    pub record_id: String,
    pub values: Vec<(String, f64)>,
}

impl MarginVector {
    pub fn new(record_id: impl Into<String>, values: Vec<(String, f64)>) -> Result<Self> {
        let record_id = record_id.into();
        if values.is_empty() {
            return Err(Error::InvalidRecord {
                id: record_id,
                message: "margin vector needs at least one source".into(),
            });
        }
        for (i, (name, v)) in values.iter().enumerate() {
            if values[..i].iter().any(|(other, _)| other == name) {
                return Err(Error::InvalidRecord {
                    id: record_id,
                    message: format!("source `{name}` listed twice"),
                });
            }
            finite(*v, &format!("margin `{name}` of `{record_id}`"))?;
        }
        Ok(MarginVector { record_id, values })
    }

    /// Pick `sources` from a record, in the given order.
    pub fn from_record(record: &PreferenceRecord, sources: &[String]) -> Result<Self> {
        let values = sources
            .iter()
            .map(|s| Ok((s.clone(), record.margin(s)?)))
            .collect::<Result<Vec<_>>>()?;
        MarginVector::new(record.id.clone(), values)
    }

    pub fn get(&self, source: &str) -> Option<f64> {
        self.values
            .iter()
            .find(|(s, _)| s == source)
            .map(|(_, v)| *v)
    }
}
