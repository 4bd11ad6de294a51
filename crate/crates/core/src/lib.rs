//! Margin-based preference data curation.
//!
//! The crate scores preference pairs with one or more reward-margin sources,
//! projects each margin onto a preference probability, fuses the sources under
//! a conditional-independence assumption and selects high-confidence subsets.
//! Two small laboratories ship alongside the pipeline: a synthetic
//! Bradley-Terry setting for studying parameter shrinkage and inflation, and a
//! tabular DPO trainer that produces implicit-reward margins.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default) and fall back to plain iterators otherwise. Results are
//! identical in both modes.

pub mod aggregate;
pub mod dataset;
pub mod error;
pub mod margin;
mod par;
pub mod pipeline;
pub mod rng;
pub mod select;
pub mod shrinkage;
pub mod stats;
pub mod toy_dpo;

pub use aggregate::{aggregate, aggregate_dataset, clamp_probs, AggregatedScore, DEFAULT_EPS};
pub use dataset::{
    load_dataset, read_dataset, read_jsonl, read_selection, write_dataset, write_jsonl,
    write_selection, PreferenceRecord, SelectionOutput, Strictness,
};
pub use error::{Error, Result};
pub use margin::{
    external_margin, fit_projection, implicit_margin, project, LogprobBundle, MarginVector,
    ProjectionParams, ProjectionSpec,
};
pub use select::{
    iterative_round, remove_outliers, select_bees, select_random, select_region, ExcludeNegative,
    StrategyConfig, StrategyKind,
};

/// Logistic sigmoid, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(p / (1 - p))`.
pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}
