use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use margin_forge::pipeline::{self, AggregatedRecord, ScoredRecord};
use margin_forge::select::default_tau;
use margin_forge::stats::stats;
use margin_forge::{
    load_dataset, read_jsonl, select_bees, select_random, select_region, write_dataset,
    write_jsonl, write_selection, ExcludeNegative, PreferenceRecord, ProjectionParams,
    StrategyConfig, StrategyKind, Strictness,
};

mod lab;

#[derive(Parser)]
#[command(
    name = "margin-forge",
    version,
    about = "Margin-based preference data selection"
)]
struct Cli {
    /// Abort on the first malformed input line instead of skipping it.
    #[arg(long, global = true)]
    strict: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate records and derive implicit margins from log-probabilities.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fit per-source projections and attach a `prob` map to every record.
    Score {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long = "source", required = true)]
        sources: Vec<String>,
        #[arg(long, default_value_t = -2.0, allow_negative_numbers = true)]
        lower: f64,
        #[arg(long, default_value_t = 30)]
        min_tail: usize,
        /// Disable the tail-width condition of the upper-bound fit.
        #[arg(long)]
        no_tail_width: bool,
        /// Where to write the fitted bounds.
        #[arg(long)]
        specs: Option<PathBuf>,
    },
    /// Fuse scored probabilities into `fused` and `log_odds`.
    Aggregate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = margin_forge::DEFAULT_EPS)]
        eps: f64,
        /// Sources to fuse; defaults to every key of the `prob` map.
        #[arg(long = "source")]
        sources: Vec<String>,
    },
    /// Select a subset. `bees` reads aggregated records.
    Select(SelectArgs),
    /// Histograms, correlations and sign quadrants as JSON.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sources: Vec<String>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        outlier_q: Option<f64>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run score, aggregate, select and stats from a TOML config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
    /// Synthetic experiments.
    #[command(subcommand)]
    Lab(LabCommand),
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum)]
    strategy: Strategy,
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = margin_forge::select::DEFAULT_OUTLIER_QUANTILE)]
    outlier_q: f64,
    #[arg(long, env = "MARGIN_FORGE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Exclude::Any)]
    exclude_negative: Exclude,
    #[arg(long, default_value_t = margin_forge::DEFAULT_EPS)]
    eps: f64,
}

#[derive(Subcommand)]
enum LabCommand {
    /// Shrinkage and inflation of the Bradley-Terry fit under label noise.
    Shrinkage(lab::ShrinkageArgs),
    /// Tabular DPO training on subsets chosen by each strategy.
    Dpo(lab::DpoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Random,
    P,
    Z,
    N,
    Bees,
}

impl From<Strategy> for StrategyKind {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Random => StrategyKind::Random,
            Strategy::P => StrategyKind::MarginP,
            Strategy::Z => StrategyKind::MarginZ,
            Strategy::N => StrategyKind::MarginN,
            Strategy::Bees => StrategyKind::Bees,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Exclude {
    Any,
    All,
    Off,
}

impl From<Exclude> for ExcludeNegative {
    fn from(e: Exclude) -> Self {
        match e {
            Exclude::Any => ExcludeNegative::Any,
            Exclude::All => ExcludeNegative::All,
            Exclude::Off => ExcludeNegative::Off,
        }
    }
}

fn strictness(strict: bool) -> Strictness {
    if strict {
        Strictness::Strict
    } else {
        Strictness::Lenient
    }
}

fn read_records(path: &Path, strict: bool) -> Result<Vec<PreferenceRecord>> {
    let mut reader = load_dataset(path, strictness(strict))?;
    let records = reader.by_ref().collect::<margin_forge::Result<Vec<_>>>()?;
    if reader.skipped() > 0 {
        eprintln!(
            "skipped {} malformed lines in {}",
            reader.skipped(),
            path.display()
        );
    }
    Ok(records)
}

fn write_json<T: serde::Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn prob_sources(scored: &[ScoredRecord]) -> Vec<String> {
    scored
        .first()
        .map(|s| s.prob.keys().cloned().collect())
        .unwrap_or_default()
}

fn select(args: SelectArgs, strict: bool) -> Result<()> {
    let kind = StrategyKind::from(args.strategy);
    let selection = match kind {
        StrategyKind::Bees => {
            let aggregated: Vec<AggregatedRecord> = read_jsonl(&args.input).with_context(|| {
                format!(
                    "`bees` expects aggregated records in {}",
                    args.input.display()
                )
            })?;
            let scored: Vec<ScoredRecord> = aggregated.iter().map(|a| a.scored.clone()).collect();
            let sources = prob_sources(&scored);
            let (scores, margins) = pipeline::bees_inputs(&aggregated, &sources, args.eps)?;
            select_bees(&scores, &margins, args.k, args.exclude_negative.into())?
        }
        _ => {
            let records = read_records(&args.input, strict)?;
            if kind == StrategyKind::Random {
                select_random(&records, args.k, args.seed)?
            } else {
                let Some(source) = args.source.as_deref() else {
                    bail!("strategy `{kind}` needs --source");
                };
                let cfg = StrategyConfig::region(kind, source, args.k)
                    .with_tau(args.tau.unwrap_or_else(|| default_tau(source)))
                    .with_outlier_quantile(args.outlier_q)
                    .with_seed(args.seed);
                select_region(&records, &cfg)?
            }
        }
    };
    write_selection(&selection, &args.output)?;
    eprintln!(
        "selected {} records ({})",
        selection.len(),
        selection.config_digest
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { input, output } => {
            let records = pipeline::ingest(read_records(&input, cli.strict)?)?;
            write_dataset(&records, &output)?;
            eprintln!("wrote {} records", records.len());
        }
        Command::Score {
            input,
            output,
            sources,
            lower,
            min_tail,
            no_tail_width,
            specs,
        } => {
            let records = read_records(&input, cli.strict)?;
            let params = ProjectionParams {
                lower,
                min_tail,
                tail_width_rule: !no_tail_width,
            };
            let (fitted, scored) = pipeline::score(&records, &sources, &params)?;
            write_jsonl(&scored, &output)?;
            for spec in fitted.values() {
                eprintln!("{}: L = {}, U = {}", spec.source, spec.lower, spec.upper);
            }
            if let Some(path) = specs {
                write_json(&fitted, Some(&path))?;
            }
        }
        Command::Aggregate {
            input,
            output,
            eps,
            sources,
        } => {
            let scored: Vec<ScoredRecord> = read_jsonl(&input)?;
            let sources = if sources.is_empty() {
                prob_sources(&scored)
            } else {
                sources
            };
            let aggregated = pipeline::fuse(&scored, &sources, eps)?;
            write_jsonl(&aggregated, &output)?;
        }
        Command::Select(args) => select(args, cli.strict)?,
        Command::Stats {
            input,
            sources,
            bins,
            outlier_q,
            output,
        } => {
            let records = read_records(&input, cli.strict)?;
            let report = stats(&records, &sources, bins, outlier_q)?;
            write_json(&report, output.as_deref())?;
        }
        Command::Pipeline { config } => {
            let out = pipeline::run_file(&config)?;
            eprintln!(
                "selected {} records ({})",
                out.selection.len(),
                out.selection.config_digest
            );
        }
        Command::Lab(LabCommand::Shrinkage(args)) => lab::shrinkage(args)?,
        Command::Lab(LabCommand::Dpo(args)) => lab::dpo(args)?,
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
