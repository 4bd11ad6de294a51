use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use margin_forge::read_jsonl;
use margin_forge::select::{StrategyConfig, StrategyKind};
use margin_forge::shrinkage::{
    foc_gap, generate, inflation_experiment, norm2, sigma_sweep, SyntheticConfig,
};
use margin_forge::toy_dpo::{
    dynamics_experiment, weak_to_strong_correlation, DpoConfig, PlantedConfig, PlantedInstance,
    PlantedRecord, DEFAULT_BETA,
};
use serde_json::json;

use crate::Strategy;

#[derive(Args)]
pub struct ShrinkageArgs {
    /// Feature dimension; must match `--omega-star` when given.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "2,1",
        allow_negative_numbers = true
    )]
    omega_star: Vec<f64>,
    /// Noise level of the single-batch inflation run.
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    #[arg(long, default_value_t = 200_000)]
    n: usize,
    #[arg(long, env = "MARGIN_FORGE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.25)]
    select_frac: f64,
    #[arg(long, default_value_t = 1e-6)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// Noise levels of the sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,4")]
    sigmas: Vec<f64>,
    /// Seeds per sweep level, counting up from `--seed`.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value = "shrinkage-out")]
    output_dir: PathBuf,
}

pub fn shrinkage(args: ShrinkageArgs) -> Result<()> {
    if let Some(d) = args.dim {
        if d != args.omega_star.len() {
            bail!(
                "--dim {d} does not match {} omega-star entries",
                args.omega_star.len()
            );
        }
    }
    fs::create_dir_all(&args.output_dir)
        .with_context(|| format!("creating {}", args.output_dir.display()))?;
    let cfg = SyntheticConfig::new(args.omega_star.clone(), args.sigma, args.n, args.seed);
    cfg.validate()?;

    let (full, selected) =
        inflation_experiment(&cfg, args.select_frac, args.lambda, args.tol, args.max_iter)?;
    let gap = foc_gap(&generate(&cfg)?, &args.omega_star);
    let report = json!({
        "config": cfg,
        "select_frac": args.select_frac,
        "lambda": args.lambda,
        "omega_star_norm": norm2(&args.omega_star),
        "full": full,
        "full_norm": norm2(&full.omega_hat),
        "selected": selected,
        "selected_norm": norm2(&selected.omega_hat),
        "foc_gap_at_omega_star": gap,
    });
    fs::write(
        args.output_dir.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;

    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let rows = sigma_sweep(
        &cfg,
        &args.sigmas,
        &seeds,
        args.lambda,
        args.tol,
        args.max_iter,
    )?;
    let mut csv = String::from("sigma,seed,norm,omega_hat,foc_residual,converged\n");
    for r in &rows {
        let omega: Vec<String> = r.omega_hat.iter().map(|w| w.to_string()).collect();
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sigma,
            r.seed,
            r.norm,
            omega.join(";"),
            r.foc_residual,
            r.converged
        ));
    }
    fs::write(args.output_dir.join("sweep.csv"), csv)?;
    eprintln!(
        "|w*| = {:.4}, full fit {:.4}, top {} fit {:.4}",
        norm2(&args.omega_star),
        norm2(&full.omega_hat),
        args.select_frac,
        norm2(&selected.omega_hat)
    );
    Ok(())
}

#[derive(Args)]
pub struct DpoArgs {
    #[arg(long, default_value_t = 8)]
    prompts: usize,
    #[arg(long, default_value_t = 8)]
    responses: usize,
    /// `planted`, or a JSONL file of `{id, prompt, winner, loser, external}`.
    #[arg(long, default_value = "planted")]
    pairs: String,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = 100.0)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    /// Minibatch size; full batch when absent.
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    seed_lr: f64,
    #[arg(long, default_value_t = 300)]
    seed_epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    seed_fraction: f64,
    /// Rank of the small seed model used for the correlation report.
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long, default_value_t = 64)]
    k: usize,
    /// Strategies to train; all of them when absent.
    #[arg(long, value_enum)]
    strategy: Vec<Strategy>,
    #[arg(long, env = "MARGIN_FORGE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "dpo-out")]
    output_dir: PathBuf,
}

pub fn dpo(args: DpoArgs) -> Result<()> {
    let planted = PlantedConfig {
        prompts: args.prompts,
        responses: args.responses,
        seed_fraction: args.seed_fraction,
        seed: args.seed,
        ..PlantedConfig::default()
    };
    let instance = if args.pairs == "planted" {
        PlantedInstance::generate(&planted)?
    } else {
        let records: Vec<PlantedRecord> = read_jsonl(&args.pairs)?;
        PlantedInstance::from_records(&planted, records)?
    };
    let seed_cfg = DpoConfig {
        beta: args.beta,
        lr: args.seed_lr,
        epochs: args.seed_epochs,
        seed: args.seed,
        minibatch: None,
    };
    let train_cfg = DpoConfig {
        beta: args.beta,
        lr: args.lr,
        epochs: args.epochs,
        seed: args.seed,
        minibatch: args.minibatch,
    };
    let records = instance.to_records(&seed_cfg)?;
    let kinds: Vec<StrategyKind> = if args.strategy.is_empty() {
        vec![
            StrategyKind::Random,
            StrategyKind::MarginP,
            StrategyKind::MarginZ,
            StrategyKind::MarginN,
            StrategyKind::Bees,
        ]
    } else {
        args.strategy.iter().map(|&s| s.into()).collect()
    };
    let strategies: Vec<StrategyConfig> = kinds
        .iter()
        .map(|&kind| {
            match kind {
                StrategyKind::Random | StrategyKind::Bees => StrategyConfig::new(kind, args.k),
                _ => StrategyConfig::region(kind, "external", args.k),
            }
            .with_seed(args.seed)
        })
        .collect();
    let traces = dynamics_experiment(&instance, &records, &strategies, &train_cfg)?;

    fs::create_dir_all(&args.output_dir)
        .with_context(|| format!("creating {}", args.output_dir.display()))?;
    let mut summary = serde_json::Map::new();
    for t in &traces {
        let name = t.strategy.as_str();
        fs::write(
            args.output_dir.join(format!("trace_{name}.csv")),
            t.trace.to_csv(),
        )?;
        let last = t.trace.last().expect("trace has the initial step");
        summary.insert(
            name.to_string(),
            json!({
                "selected": t.selected,
                "final_loss": last.loss,
                "min_loss": t.trace.min_loss(),
                "final_margin": last.margin,
            }),
        );
        eprintln!("{name:>6}: loss {:.4} margin {:.3}", last.loss, last.margin);
    }
    let rho = weak_to_strong_correlation(&instance, &seed_cfg, args.rank)?;
    let report = json!({
        "records": instance.records.len(),
        "seed_records": instance.seed_indices().len(),
        "weak_to_strong_correlation": rho,
        "strategies": summary,
    });
    fs::write(
        args.output_dir.join("summary.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(())
}
