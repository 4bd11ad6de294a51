//! Subset selection strategies.
//!
//! * `random`: uniform without replacement.
//! * `p` / `n`: the most positive / most negative margins of one source.
//! * `z`: uniform draws among pairs whose margin lies in `[-tau, tau]`.
//! * `bees`: highest fused preference probability, skipping pairs with a
//!   negative margin.
//!
//! The single-source region strategies drop extreme margins first; `bees`
//! relies on projection clipping instead. Ties are broken by lexicographic id
//! everywhere, and all randomness comes from the `selection` stream of the
//! configured seed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_dataset, AggregatedScore};
use crate::dataset::{config_digest, PreferenceRecord, SelectionOutput};
use crate::error::{Error, Result};
use crate::margin::{MarginVector, ProjectionSpec};
use crate::rng::{stream_rng, Stream};

/// Z-band half-width for reward-model margins.
pub const DEFAULT_TAU_REWARD: f64 = 1.0;
/// Z-band half-width for perplexity-style (IFD / CPPL) margins.
pub const DEFAULT_TAU_PERPLEXITY: f64 = 0.1;
pub const DEFAULT_OUTLIER_QUANTILE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "p")]
    MarginP,
    #[serde(rename = "z")]
    MarginZ,
    #[serde(rename = "n")]
    MarginN,
    #[serde(rename = "bees")]
    Bees,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::MarginP => "p",
            StrategyKind::MarginZ => "z",
            StrategyKind::MarginN => "n",
            StrategyKind::Bees => "bees",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "random" => StrategyKind::Random,
            "p" => StrategyKind::MarginP,
            "z" => StrategyKind::MarginZ,
            "n" => StrategyKind::MarginN,
            "bees" => StrategyKind::Bees,
            _ => return None,
        })
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which negative-margin pairs `bees` refuses to select.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExcludeNegative {
    /// Negative in at least one source.
    #[default]
    Any,
    /// Negative in every source.
    All,
    Off,
}

impl ExcludeNegative {
    fn excludes(self, margins: &MarginVector) -> bool {
        let mut negatives = margins.values.iter().map(|(_, m)| *m < 0.0);
        match self {
            ExcludeNegative::Any => negatives.any(|n| n),
            ExcludeNegative::All => negatives.all(|n| n),
            ExcludeNegative::Off => false,
        }
    }
}

/// Z-band default for a source: perplexity-style sources (name contains
/// `ifd` or `cppl`) use the narrow band.
pub fn default_tau(source: &str) -> f64 {
    let s = source.to_ascii_lowercase();
    if s.contains("ifd") || s.contains("cppl") {
        DEFAULT_TAU_PERPLEXITY
    } else {
        DEFAULT_TAU_REWARD
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Margin source, required by `p`, `z` and `n`.
    pub source: Option<String>,
    pub k: usize,
    pub tau: f64,
    pub outlier_quantile: f64,
    pub seed: u64,
    pub exclude_negative: ExcludeNegative,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, k: usize) -> Self {
        StrategyConfig {
            kind,
            source: None,
            k,
            tau: DEFAULT_TAU_REWARD,
            outlier_quantile: DEFAULT_OUTLIER_QUANTILE,
            seed: 0,
            exclude_negative: ExcludeNegative::Any,
        }
    }

    /// Region strategy on `source` with the source's default tau.
    pub fn region(kind: StrategyKind, source: &str, k: usize) -> Self {
        StrategyConfig {
            source: Some(source.to_string()),
            tau: default_tau(source),
            ..StrategyConfig::new(kind, k)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_outlier_quantile(mut self, q: f64) -> Self {
        self.outlier_quantile = q;
        self
    }

    pub fn with_exclude_negative(mut self, rule: ExcludeNegative) -> Self {
        self.exclude_negative = rule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::param("k must be at least 1"));
        }
        if matches!(
            self.kind,
            StrategyKind::MarginP | StrategyKind::MarginZ | StrategyKind::MarginN
        ) {
            if self.source.is_none() {
                return Err(Error::param(format!(
                    "strategy `{}` needs a margin source",
                    self.kind
                )));
            }
            check_quantile(self.outlier_quantile)?;
        }
        if self.kind == StrategyKind::MarginZ && !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::param(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

fn check_quantile(q: f64) -> Result<()> {
    if q > 0.0 && q < 0.5 {
        Ok(())
    } else {
        Err(Error::param(format!(
            "outlier quantile must lie in (0, 0.5), got {q}"
        )))
    }
}

fn ensure_unique<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId {
                id: id.to_string(),
                line: 0,
            });
        }
    }
    Ok(())
}

/// Lower and upper cut values for symmetric outlier removal.
///
/// With `j = floor(q * n)` the cuts are the (j+1)-th smallest and the
/// (j+1)-th largest value, so for distinct values exactly `j` records are
/// trimmed from each end and equal values are never split.
fn outlier_cuts(values: &[f64], q: f64) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let j = ((q * n as f64) + 1e-9).floor() as usize;
    let j = j.min((n - 1) / 2);
    (sorted[j], sorted[n - 1 - j])
}

/// Drop records whose `source` margin falls outside the symmetric
/// `q` / `1 - q` nearest-rank cuts.
pub fn remove_outliers(
    records: &[PreferenceRecord],
    source: &str,
    q: f64,
) -> Result<Vec<PreferenceRecord>> {
    check_quantile(q)?;
    if records.is_empty() {
        return Err(Error::Insufficient {
            requested: 1,
            available: 0,
        });
    }
    let margins = records
        .iter()
        .map(|r| r.margin(source))
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = outlier_cuts(&margins, q);
    Ok(records
        .iter()
        .zip(&margins)
        .filter(|(_, &m)| m >= lo && m <= hi)
        .map(|(r, _)| r.clone())
        .collect())
}

/// Uniform random keys for `ids`, assigned in sorted-id order so the draw
/// does not depend on input order. Returns `(id, key)` pairs.
fn random_keys<'a>(ids: &[&'a str], seed: u64) -> Vec<(&'a str, f64)> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut rng = stream_rng(seed, Stream::Selection);
    sorted
        .into_iter()
        .map(|id| (id, rng.random::<f64>()))
        .collect()
}

fn by_score_then_id(a: &(&str, f64), b: &(&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

fn output(kind: StrategyKind, ranked: Vec<(&str, f64)>, config_digest: String) -> SelectionOutput {
    SelectionOutput {
        strategy: kind,
        selected_ids: ranked.iter().map(|(id, _)| id.to_string()).collect(),
        scores: ranked
            .into_iter()
            .map(|(id, s)| (id.to_string(), s))
            .collect(),
        config_digest,
    }
}

/// Uniform selection of `k` records without replacement. Scores are the
/// random ranking keys.
pub fn select_random(records: &[PreferenceRecord], k: usize, seed: u64) -> Result<SelectionOutput> {
    if k > records.len() {
        return Err(Error::Insufficient {
            requested: k,
            available: records.len(),
        });
    }
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    ensure_unique(ids.iter().copied())?;
    let mut keyed = random_keys(&ids, seed);
    keyed.sort_by(by_score_then_id);
    keyed.truncate(k);
    let digest = config_digest(StrategyKind::Random, &(k, seed));
    Ok(output(StrategyKind::Random, keyed, digest))
}

/// Single-source P / Z / N selection.
///
/// Scores are the ranking key: the margin for P, the negated margin for N
/// (so the output stays nonincreasing in score), and the random draw key for
/// Z.
pub fn select_region(
    records: &[PreferenceRecord],
    cfg: &StrategyConfig,
) -> Result<SelectionOutput> {
    cfg.validate()?;
    let source = cfg.source.as_deref().expect("validated");
    ensure_unique(records.iter().map(|r| r.id.as_str()))?;
    let kept = remove_outliers(records, source, cfg.outlier_quantile)?;
    let margins: Vec<(&str, f64)> = kept
        .iter()
        .map(|r| Ok((r.id.as_str(), r.margin(source)?)))
        .collect::<Result<_>>()?;

    let mut ranked: Vec<(&str, f64)> = match cfg.kind {
        StrategyKind::MarginP => margins,
        StrategyKind::MarginN => margins.into_iter().map(|(id, m)| (id, -m)).collect(),
        StrategyKind::MarginZ => {
            let band: Vec<&str> = margins
                .iter()
                .filter(|(_, m)| m.abs() <= cfg.tau)
                .map(|(id, _)| *id)
                .collect();
            random_keys(&band, cfg.seed)
        }
        other => {
            return Err(Error::param(format!(
                "select_region does not handle strategy `{other}`"
            )))
        }
    };
    if ranked.len() < cfg.k {
        return Err(Error::Insufficient {
            requested: cfg.k,
            available: ranked.len(),
        });
    }
    ranked.sort_by(by_score_then_id);
    ranked.truncate(cfg.k);
    // remap borrowed ids onto the kept records' lifetime
    let ranked: Vec<(&str, f64)> = ranked.into_iter().collect();
    let digest = config_digest(cfg.kind, cfg);
    Ok(output(cfg.kind, ranked, digest))
}

#[derive(Serialize)]
struct BeesDigest<'a> {
    k: usize,
    exclude_negative: ExcludeNegative,
    sources: Vec<&'a str>,
    round: Option<u32>,
    eps: Option<f64>,
    specs: Option<&'a BTreeMap<String, ProjectionSpec>>,
}

fn bees_ranked<'a>(
    scores: &'a [AggregatedScore],
    margins: &[MarginVector],
    k: usize,
    exclude: ExcludeNegative,
) -> Result<Vec<(&'a AggregatedScore, f64)>> {
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    ensure_unique(scores.iter().map(|s| s.record_id.as_str()))?;
    let by_id: HashMap<&str, &MarginVector> =
        margins.iter().map(|m| (m.record_id.as_str(), m)).collect();
    let mut eligible = Vec::with_capacity(scores.len());
    for s in scores {
        let mv = by_id
            .get(s.record_id.as_str())
            .ok_or_else(|| Error::InvalidRecord {
                id: s.record_id.clone(),
                message: "aggregated score without margins".into(),
            })?;
        if !exclude.excludes(mv) {
            eligible.push((s, s.log_odds));
        }
    }
    if eligible.is_empty() {
        return Err(Error::NoEligible);
    }
    eligible.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| a.0.record_id.cmp(&b.0.record_id))
    });
    eligible.truncate(k);
    Ok(eligible)
}

/// Highest fused probability first, ranked on the summed log-odds so that
/// saturated probabilities still order correctly. Returns at most `k`
/// records; fewer when not enough are eligible.
pub fn select_bees(
    scores: &[AggregatedScore],
    margins: &[MarginVector],
    k: usize,
    exclude: ExcludeNegative,
) -> Result<SelectionOutput> {
    let ranked = bees_ranked(scores, margins, k, exclude)?;
    let digest = config_digest(
        StrategyKind::Bees,
        &BeesDigest {
            k,
            exclude_negative: exclude,
            sources: source_names(margins),
            round: None,
            eps: None,
            specs: None,
        },
    );
    Ok(output(
        StrategyKind::Bees,
        ranked
            .into_iter()
            .map(|(s, _)| (s.record_id.as_str(), s.fused))
            .collect(),
        digest,
    ))
}

fn source_names(margins: &[MarginVector]) -> Vec<&str> {
    margins
        .first()
        .map(|m| m.values.iter().map(|(s, _)| s.as_str()).collect())
        .unwrap_or_default()
}

/// One round of iterative selection: fuse the round's candidate pool with
/// already-fitted projection specs and keep the top `round_cfg.k`.
pub fn iterative_round(
    pool: &[MarginVector],
    round_cfg: &StrategyConfig,
    specs: &BTreeMap<String, ProjectionSpec>,
    eps: f64,
    round: u32,
) -> Result<SelectionOutput> {
    let scores = aggregate_dataset(pool, specs, eps)?;
    let ranked = bees_ranked(&scores, pool, round_cfg.k, round_cfg.exclude_negative)?;
    let digest = config_digest(
        StrategyKind::Bees,
        &BeesDigest {
            k: round_cfg.k,
            exclude_negative: round_cfg.exclude_negative,
            sources: source_names(pool),
            round: Some(round),
            eps: Some(eps),
            specs: Some(specs),
        },
    );
    Ok(output(
        StrategyKind::Bees,
        ranked
            .into_iter()
            .map(|(s, _)| (s.record_id.as_str(), s.fused))
            .collect(),
        digest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::DEFAULT_EPS;
    use proptest::prelude::*;

    fn recs(items: &[(&str, f64)]) -> Vec<PreferenceRecord> {
        items
            .iter()
            .map(|(id, m)| PreferenceRecord::new(*id).with_margin("ex", *m))
            .collect()
    }

    fn five() -> Vec<PreferenceRecord> {
        recs(&[
            ("a", 3.0),
            ("b", -3.0),
            ("c", 0.05),
            ("d", 0.9),
            ("e", -0.02),
        ])
    }

    fn region(kind: StrategyKind, k: usize) -> StrategyConfig {
        // q below 1/n keeps everything
        StrategyConfig::region(kind, "ex", k)
            .with_tau(0.1)
            .with_outlier_quantile(0.1)
    }

    #[test]
    fn region_examples() {
        let r = five();
        assert_eq!(
            select_region(&r, &region(StrategyKind::MarginP, 1))
                .unwrap()
                .selected_ids,
            ["a"]
        );
        let n = select_region(&r, &region(StrategyKind::MarginN, 1)).unwrap();
        assert_eq!(n.selected_ids, ["b"]);
        assert_eq!(n.scores["b"], 3.0);
        for seed in 0..20 {
            let z = select_region(&r, &region(StrategyKind::MarginZ, 1).with_seed(seed)).unwrap();
            assert!(["c", "e"].contains(&z.selected_ids[0].as_str()));
        }
        let z = select_region(&r, &region(StrategyKind::MarginZ, 2)).unwrap();
        let mut ids = z.selected_ids.clone();
        ids.sort();
        assert_eq!(ids, ["c", "e"]);
        let err = select_region(&r, &region(StrategyKind::MarginZ, 3)).unwrap_err();
        assert!(matches!(
            err,
            Error::Insufficient {
                requested: 3,
                available: 2
            }
        ));
    }

    #[test]
    fn default_taus() {
        assert_eq!(default_tau("external"), 1.0);
        assert_eq!(default_tau("implicit"), 1.0);
        assert_eq!(default_tau("ifd"), 0.1);
        assert_eq!(default_tau("CPPL_margin"), 0.1);
    }

    #[test]
    fn p_and_n_ties_break_by_id() {
        let r = recs(&[("b", 1.0), ("a", 1.0), ("c", 1.0), ("d", -1.0), ("e", -1.0)]);
        let p = select_region(&r, &region(StrategyKind::MarginP, 2)).unwrap();
        assert_eq!(p.selected_ids, ["a", "b"]);
        let n = select_region(&r, &region(StrategyKind::MarginN, 2)).unwrap();
        assert_eq!(n.selected_ids, ["d", "e"]);
    }

    #[test]
    fn region_requires_source() {
        let cfg = StrategyConfig::new(StrategyKind::MarginP, 1);
        assert!(select_region(&five(), &cfg).is_err());
    }

    #[test]
    fn outlier_examples() {
        let r: Vec<_> = (1..=100)
            .map(|i| PreferenceRecord::new(format!("r{i:03}")).with_margin("ex", i as f64))
            .collect();
        let kept = remove_outliers(&r, "ex", 0.05).unwrap();
        let ms: Vec<f64> = kept.iter().map(|r| r.margins["ex"]).collect();
        assert_eq!(ms, (6..=95).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(remove_outliers(&r, "ex", 0.005).unwrap().len(), 100);
        let flat = recs(&[("a", 2.0), ("b", 2.0), ("c", 2.0), ("d", 2.0)]);
        assert_eq!(remove_outliers(&flat, "ex", 0.3).unwrap().len(), 4);
        assert!(remove_outliers(&[], "ex", 0.1).is_err());
        assert!(remove_outliers(&r, "ex", 0.5).is_err());
    }

    #[test]
    fn random_examples() {
        let r = five();
        let all = select_random(&r, 5, 9).unwrap();
        let mut ids = all.selected_ids.clone();
        ids.sort();
        assert_eq!(ids, ["a", "b", "c", "d", "e"]);
        assert_eq!(
            select_random(&r, 3, 4).unwrap(),
            select_random(&r, 3, 4).unwrap()
        );
        assert!(select_random(&r, 6, 0).is_err());
        // input order does not matter
        let mut rev = r.clone();
        rev.reverse();
        assert_eq!(
            select_random(&rev, 3, 4).unwrap(),
            select_random(&r, 3, 4).unwrap()
        );
    }

    fn scored(id: &str, fused: f64, margins: &[f64]) -> (AggregatedScore, MarginVector) {
        let values: Vec<_> = margins
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("s{i}"), *m))
            .collect();
        let log_odds = crate::logit(fused);
        (
            AggregatedScore {
                record_id: id.into(),
                per_source: vec![],
                fused,
                log_odds,
            },
            MarginVector::new(id, values).unwrap(),
        )
    }

    fn split(
        items: Vec<(AggregatedScore, MarginVector)>,
    ) -> (Vec<AggregatedScore>, Vec<MarginVector>) {
        items.into_iter().unzip()
    }

    #[test]
    fn bees_excludes_negative_margins() {
        let (s, m) = split(vec![
            scored("a", 0.99, &[1.0, 2.0]),
            scored("b", 0.95, &[1.0, -0.3]),
        ]);
        let out = select_bees(&s, &m, 2, ExcludeNegative::Any).unwrap();
        assert_eq!(out.selected_ids, ["a"]);
        let out = select_bees(&s, &m, 2, ExcludeNegative::All).unwrap();
        assert_eq!(out.selected_ids, ["a", "b"]);
    }

    #[test]
    fn bees_needs_an_eligible_record() {
        let (s, m) = split(vec![
            scored("a", 0.99, &[-1.0, 2.0]),
            scored("b", 0.95, &[1.0, -0.3]),
        ]);
        assert!(matches!(
            select_bees(&s, &m, 1, ExcludeNegative::Any),
            Err(Error::NoEligible)
        ));
    }

    #[test]
    fn bees_ranks_by_fused() {
        let (s, m) = split(vec![
            scored("w", 0.6, &[1.0]),
            scored("x", 0.9, &[1.0]),
            scored("y", 0.7, &[1.0]),
            scored("z", 0.8, &[1.0]),
        ]);
        let out = select_bees(&s, &m, 3, ExcludeNegative::Any).unwrap();
        assert_eq!(out.selected_ids, ["x", "z", "y"]);
        assert_eq!(out.scores["z"], 0.8);
    }

    #[test]
    fn iterative_round_ties_at_upper_bound_go_by_id() {
        let specs: BTreeMap<_, _> = [
            (
                "ex".to_string(),
                ProjectionSpec::new("ex", -2.0, 3.0).unwrap(),
            ),
            (
                "im".to_string(),
                ProjectionSpec::new("im", -2.0, 1.0).unwrap(),
            ),
        ]
        .into();
        let pool: Vec<_> = ["q", "c", "m", "a"]
            .iter()
            .map(|id| MarginVector::new(*id, vec![("ex".into(), 5.0), ("im".into(), 1.0)]).unwrap())
            .collect();
        let cfg = StrategyConfig::new(StrategyKind::Bees, 2);
        let out = iterative_round(&pool, &cfg, &specs, DEFAULT_EPS, 1).unwrap();
        assert_eq!(out.selected_ids, ["a", "c"]);
        assert_eq!(
            out,
            iterative_round(&pool, &cfg, &specs, DEFAULT_EPS, 1).unwrap()
        );
        let other_round = iterative_round(&pool, &cfg, &specs, DEFAULT_EPS, 2).unwrap();
        assert_eq!(other_round.selected_ids, out.selected_ids);
        assert_ne!(other_round.config_digest, out.config_digest);
    }

    proptest! {
        #[test]
        fn outlier_count_follows_rank_arithmetic(
            ms in prop::collection::vec(-100.0f64..100.0, 10..400),
            q in 0.001f64..0.45,
        ) {
            let r: Vec<_> = ms.iter().enumerate()
                .map(|(i, m)| PreferenceRecord::new(format!("{i}")).with_margin("ex", *m))
                .collect();
            let n = r.len() as f64;
            let kept = remove_outliers(&r, "ex", q).unwrap().len() as f64;
            prop_assert!(kept >= (1.0 - 2.0 * q) * n - 2.0);
            prop_assert!(kept <= (1.0 - 2.0 * q) * n + 2.0);
        }

        #[test]
        fn p_and_n_disjoint(ms in prop::collection::vec(-10.0f64..10.0, 20..200), seed in any::<u64>()) {
            let r: Vec<_> = ms.iter().enumerate()
                .map(|(i, m)| PreferenceRecord::new(format!("{i}")).with_margin("ex", *m))
                .collect();
            let kept = remove_outliers(&r, "ex", 0.05).unwrap().len();
            let k = (seed as usize % (kept / 2)).max(1);
            let cfg = StrategyConfig::region(StrategyKind::MarginP, "ex", k).with_outlier_quantile(0.05);
            let p = select_region(&r, &cfg).unwrap();
            let n = select_region(&r, &StrategyConfig { kind: StrategyKind::MarginN, ..cfg }).unwrap();
            let ps: HashSet<_> = p.selected_ids.iter().collect();
            prop_assert!(n.selected_ids.iter().all(|id| !ps.contains(id)));
        }
    }
}
