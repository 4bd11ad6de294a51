//! End-to-end curation: ingest, score, aggregate, select, summarize.
//!
//! Each stage is exposed on its own for the command-line tool; [`run`]
//! chains them from a TOML config and persists every intermediate artifact
//! in the output directory:
//!
//! | file               | content                                   |
//! |--------------------|-------------------------------------------|
//! | `scored.jsonl`     | records with a per-source `prob` map      |
//! | `specs.json`       | fitted projection bounds per source       |
//! | `aggregated.jsonl` | scored records plus `fused` and `log_odds` |
//! | `selection.jsonl`  | the selection, config header first        |
//! | `stats.json`       | the statistics report                     |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_log_odds, clamp_probs, AggregatedScore, DEFAULT_EPS};
use crate::dataset::{
    config_digest, read_dataset, write_jsonl, write_selection, PreferenceRecord, SelectionOutput,
    Strictness,
};
use crate::error::{Error, Result};
use crate::margin::{fit_projection, project, MarginVector, ProjectionParams, ProjectionSpec};
use crate::rng::seed_from_env;
use crate::select::{
    default_tau, select_bees, select_random, select_region, ExcludeNegative, StrategyConfig,
    StrategyKind, DEFAULT_OUTLIER_QUANTILE,
};
use crate::sigmoid;
use crate::stats::{stats, StatsReport};

/// A record with its projected probability per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    #[serde(flatten)]
    pub record: PreferenceRecord,
    pub prob: BTreeMap<String, f64>,
}

/// A scored record with its fused probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedRecord {
    #[serde(flatten)]
    pub scored: ScoredRecord,
    pub fused: f64,
    pub log_odds: f64,
}

/// Validate records and derive the implicit margin where log-probabilities
/// are present.
pub fn ingest(mut records: Vec<PreferenceRecord>) -> Result<Vec<PreferenceRecord>> {
    for r in &mut records {
        r.validate()?;
        r.derive_implicit()?;
    }
    Ok(records)
}

/// Fit one projection per source on the full dataset and project every
/// record.
pub fn score(
    records: &[PreferenceRecord],
    sources: &[String],
    params: &ProjectionParams,
) -> Result<(BTreeMap<String, ProjectionSpec>, Vec<ScoredRecord>)> {
    if sources.is_empty() {
        return Err(Error::param("no margin sources given"));
    }
    let mut specs = BTreeMap::new();
    for s in sources {
        let ms = records
            .iter()
            .map(|r| r.margin(s))
            .collect::<Result<Vec<_>>>()?;
        specs.insert(s.clone(), fit_projection(&ms, s, params)?);
    }
    let scored = records
        .iter()
        .map(|r| {
            let prob = sources
                .iter()
                .map(|s| Ok((s.clone(), project(&specs[s], r.margin(s)?))))
                .collect::<Result<_>>()?;
            Ok(ScoredRecord {
                record: r.clone(),
                prob,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((specs, scored))
}

/// Fuse the `prob` maps of scored records over `sources`.
pub fn fuse(
    scored: &[ScoredRecord],
    sources: &[String],
    eps: f64,
) -> Result<Vec<AggregatedRecord>> {
    scored
        .iter()
        .map(|s| {
            let ps = sources
                .iter()
                .map(|src| {
                    s.prob.get(src).copied().ok_or_else(|| Error::MissingSpec {
                        record_id: s.record.id.clone(),
                        source_name: src.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let log_odds = aggregate_log_odds(&ps, eps)?;
            Ok(AggregatedRecord {
                scored: s.clone(),
                fused: sigmoid(log_odds),
                log_odds,
            })
        })
        .collect()
}

/// Rebuild the ranking inputs of BeeS from aggregated records.
pub fn bees_inputs(
    aggregated: &[AggregatedRecord],
    sources: &[String],
    eps: f64,
) -> Result<(Vec<AggregatedScore>, Vec<MarginVector>)> {
    let mut scores = Vec::with_capacity(aggregated.len());
    let mut margins = Vec::with_capacity(aggregated.len());
    for a in aggregated {
        let r = &a.scored.record;
        let ps = sources
            .iter()
            .map(|s| {
                a.scored
                    .prob
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::MissingSpec {
                        record_id: r.id.clone(),
                        source_name: s.clone(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        scores.push(AggregatedScore {
            record_id: r.id.clone(),
            per_source: sources
                .iter()
                .cloned()
                .zip(clamp_probs(&ps, eps)?)
                .collect(),
            fused: a.fused,
            log_odds: a.log_odds,
        });
        margins.push(MarginVector::from_record(r, sources)?);
    }
    Ok((scores, margins))
}

fn default_true() -> bool {
    true
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_bins() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateSection {
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for AggregateSection {
    fn default() -> Self {
        AggregateSection { eps: DEFAULT_EPS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectSection {
    /// One of `random`, `p`, `z`, `n`, `bees`.
    pub strategy: String,
    pub k: usize,
    pub source: Option<String>,
    pub tau: Option<f64>,
    pub outlier_q: Option<f64>,
    #[serde(default)]
    pub exclude_negative: ExcludeNegative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    #[serde(default = "default_bins")]
    pub bins: usize,
    pub outlier_q: Option<f64>,
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection {
            bins: default_bins(),
            outlier_q: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    #[serde(default = "default_true")]
    pub strict: bool,
    pub sources: Vec<String>,
    #[serde(default)]
    pub projection: ProjectionParams,
    #[serde(default)]
    pub aggregate: AggregateSection,
    pub select: SelectSection,
    #[serde(default)]
    pub stats: StatsSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.strategy()?;
        Ok(cfg)
    }

    /// Read a config file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.input = base.join(&cfg.input);
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn strategy(&self) -> Result<StrategyKind> {
        StrategyKind::parse(&self.select.strategy).ok_or_else(|| {
            Error::Config(format!(
                "select.strategy: unknown strategy `{}` (expected random, p, z, n or bees)",
                self.select.strategy
            ))
        })
    }

    /// Explicit seed, else `MARGIN_FORGE_SEED`, else 0.
    pub fn effective_seed(&self) -> u64 {
        self.seed.or_else(seed_from_env).unwrap_or(0)
    }

    /// Selection strategy config for the region and random strategies.
    pub fn strategy_config(&self) -> Result<StrategyConfig> {
        let kind = self.strategy()?;
        let sel = &self.select;
        let mut cfg = match &sel.source {
            Some(s) => StrategyConfig::region(kind, s, sel.k),
            None => StrategyConfig::new(kind, sel.k),
        };
        if let Some(tau) = sel.tau {
            cfg.tau = tau;
        } else if let Some(s) = &sel.source {
            cfg.tau = default_tau(s);
        }
        cfg.outlier_quantile = sel.outlier_q.unwrap_or(DEFAULT_OUTLIER_QUANTILE);
        cfg.exclude_negative = sel.exclude_negative;
        cfg.seed = self.effective_seed();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub specs: BTreeMap<String, ProjectionSpec>,
    pub selection: SelectionOutput,
    pub stats: StatsReport,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e.into()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Load a config file and run it.
pub fn run_file(path: impl AsRef<Path>) -> Result<PipelineOutput> {
    run(&stage("config", PipelineConfig::load(path))?)
}

/// Run every stage of `cfg` and persist the artifacts.
pub fn run(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let strategy_cfg = stage("config", cfg.strategy_config())?;
    let strictness = if cfg.strict {
        Strictness::Strict
    } else {
        Strictness::Lenient
    };
    let out = &cfg.output_dir;
    stage(
        "config",
        fs::create_dir_all(out).map_err(|e| Error::io(out, e)),
    )?;

    let records = stage(
        "ingest",
        read_dataset(&cfg.input, strictness).and_then(ingest),
    )?;

    let (specs, scored) = stage("score", score(&records, &cfg.sources, &cfg.projection))?;
    stage("score", write_jsonl(&scored, out.join("scored.jsonl")))?;
    stage("score", write_json(&specs, &out.join("specs.json")))?;

    let aggregated = stage("aggregate", fuse(&scored, &cfg.sources, cfg.aggregate.eps))?;
    stage(
        "aggregate",
        write_jsonl(&aggregated, out.join("aggregated.jsonl")),
    )?;

    let mut selection = stage(
        "select",
        match strategy_cfg.kind {
            StrategyKind::Bees => bees_inputs(&aggregated, &cfg.sources, cfg.aggregate.eps)
                .and_then(|(s, m)| {
                    select_bees(&s, &m, strategy_cfg.k, strategy_cfg.exclude_negative)
                }),
            StrategyKind::Random => select_random(&records, strategy_cfg.k, strategy_cfg.seed),
            _ => select_region(&records, &strategy_cfg),
        },
    )?;
    let mut digest_cfg = cfg.clone();
    digest_cfg.seed = Some(strategy_cfg.seed);
    digest_cfg.output_dir = PathBuf::new();
    selection.config_digest = config_digest(strategy_cfg.kind, &(&digest_cfg, &specs));
    stage(
        "select",
        write_selection(&selection, out.join("selection.jsonl")),
    )?;

    let report = stage(
        "stats",
        stats(&records, &cfg.sources, cfg.stats.bins, cfg.stats.outlier_q),
    )?;
    stage("stats", write_json(&report, &out.join("stats.json")))?;

    Ok(PipelineOutput {
        specs,
        selection,
        stats: report,
    })
}
