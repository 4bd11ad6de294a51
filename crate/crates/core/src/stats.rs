//! Summary statistics over margin sources: histograms, pairwise Pearson
//! correlations and the sign quadrants of a joint margin plot.

use serde::{Deserialize, Serialize};

use crate::dataset::PreferenceRecord;
use crate::error::{Error, Result};
use crate::select::remove_outliers;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub source: String,
    /// `bins + 1` edges from the minimum to the maximum margin.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]`; the maximum falls in the last bin.
    pub fn build(source: &str, values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::param("bins must be at least 1"));
        }
        if values.is_empty() {
            return Err(Error::Insufficient {
                requested: 1,
                available: 0,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("margins of `{source}`"),
            });
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Ok(Histogram {
            source: source.to_string(),
            edges,
            counts,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Pearson correlation from a single pass of running means and co-moments.
/// `None` when either input has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::param("correlation inputs differ in length"));
    }
    if xs.len() < 2 {
        return Err(Error::Insufficient {
            requested: 2,
            available: xs.len(),
        });
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let n = (i + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if !(sxx.is_finite() && syy.is_finite() && sxy.is_finite()) {
        return Err(Error::NonFinite {
            context: "correlation inputs".into(),
        });
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub a: String,
    pub b: String,
    pub pearson: Option<f64>,
}

/// Sign counts of the joint `(x, y)` margins; zero counts as positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadrants {
    pub pos_pos: usize,
    pub pos_neg: usize,
    pub neg_pos: usize,
    pub neg_neg: usize,
}

impl Quadrants {
    pub fn count(xs: &[f64], ys: &[f64]) -> Self {
        let mut q = Quadrants::default();
        for (&x, &y) in xs.iter().zip(ys) {
            match (x >= 0.0, y >= 0.0) {
                (true, true) => q.pos_pos += 1,
                (true, false) => q.pos_neg += 1,
                (false, true) => q.neg_pos += 1,
                (false, false) => q.neg_neg += 1,
            }
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub records: usize,
    /// Outlier quantile applied per source before the statistics, if any.
    pub outlier_quantile: Option<f64>,
    pub histograms: Vec<Histogram>,
    pub correlations: Vec<Correlation>,
    /// Quadrants of the first two sources (x = first, y = second).
    pub quadrants: Option<Quadrants>,
}

/// Statistics over `sources`. With `outlier_quantile`, records outside the
/// cuts of any source are dropped first.
pub fn stats(
    records: &[PreferenceRecord],
    sources: &[String],
    bins: usize,
    outlier_quantile: Option<f64>,
) -> Result<StatsReport> {
    if sources.is_empty() {
        return Err(Error::param("no margin sources given"));
    }
    let mut kept = records.to_vec();
    if let Some(q) = outlier_quantile {
        for s in sources {
            kept = remove_outliers(&kept, s, q)?;
        }
    }
    let columns = sources
        .iter()
        .map(|s| kept.iter().map(|r| r.margin(s)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let histograms = sources
        .iter()
        .zip(&columns)
        .map(|(s, c)| Histogram::build(s, c, bins))
        .collect::<Result<Vec<_>>>()?;
    let mut correlations = Vec::new();
    if sources.len() >= 2 {
        for i in 0..sources.len() {
            for j in i + 1..sources.len() {
                correlations.push(Correlation {
                    a: sources[i].clone(),
                    b: sources[j].clone(),
                    pearson: pearson(&columns[i], &columns[j])?,
                });
            }
        }
    }
    let quadrants = (sources.len() >= 2).then(|| Quadrants::count(&columns[0], &columns[1]));
    Ok(StatsReport {
        records: kept.len(),
        outlier_quantile,
        histograms,
        correlations,
        quadrants,
    })
}
