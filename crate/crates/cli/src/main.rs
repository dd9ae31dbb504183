use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use imgep_cli::commands::{self, Overrides};
use imgep_cli::{exit, ExperimentConfig};
use imgep_core::imgep::Strategy;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "imgep",
    version,
    about = "Goal exploration experiments on simulated arm-and-ball scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Use this single seed instead of the config's seed list.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Output location, replacing the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render random scenes into an image dataset file.
    GenDataset {
        #[command(flatten)]
        common: Common,
        /// Number of images.
        #[arg(long, default_value_t = 5000)]
        count: usize,
    },
    /// Train the configured VAE on a dataset file.
    TrainRepr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run one exploration per seed and write histories, curves and a summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// Strategy, replacing the config's (rpe, rge-efr, rge-vae, rge-online, mge-efr, mge-vae).
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Aggregate run summaries per strategy.
    Compare {
        /// Summary files written by `run`.
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Directory for comparison.csv and mean_curves.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write scatter and coverage-curve CSVs from a saved history.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        history: PathBuf,
    },
}

fn load(common: &Common, strategy: Option<Strategy>) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let overrides = Overrides {
        seed: common.seed_override,
        out: common.out.clone(),
        strategy,
    };
    Ok(overrides.apply(&cfg))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDataset { common, count } => {
            let cfg = load(&common, None)?;
            let path = common
                .out
                .unwrap_or_else(|| cfg.output_dir.join("dataset.bin"));
            let path = if path.extension().is_none() {
                path.join("dataset.bin")
            } else {
                path
            };
            let data = commands::gen_dataset(&cfg, count, &path)?;
            println!("wrote {} images to {}", data.len(), path.display());
        }
        Command::TrainRepr { common, dataset } => {
            let cfg = load(&common, None)?;
            let iterations = cfg.representation.train.iterations;
            let trained = commands::train_repr(&cfg, &dataset, |rec| {
                eprintln!(
                    "iter {:>6}/{iterations}  loss {:.3}  nll {:.3}  kl {:.3}",
                    rec.iteration, rec.terms.loss, rec.terms.nll, rec.terms.kl
                );
            })?;
            println!("checkpoint {}", trained.checkpoint.display());
            println!("loss curve {}", trained.loss_csv.display());
        }
        Command::Run { common, strategy } => {
            let cfg = load(&common, strategy)?;
            let rows = commands::run(&cfg, |row| {
                println!(
                    "{} seed {}: final coverage {}",
                    row.strategy, row.seed, row.final_coverage
                );
            })?;
            let finals: Vec<f64> = rows.iter().map(|r| r.final_coverage as f64).collect();
            let (mean, std) = commands::mean_std(&finals);
            println!(
                "{}: mean {mean:.2} std {std:.2} over {} seeds; summary {}",
                cfg.exploration.strategy,
                rows.len(),
                commands::strategy_dir(&cfg)
                    .join(commands::SUMMARY_FILE)
                    .display()
            );
        }
        Command::Compare { summaries, out } => {
            let aggregates = commands::compare(&summaries)?;
            println!("{:<12} {:>4} {:>10} {:>10}", "strategy", "n", "mean", "std");
            for a in &aggregates {
                println!(
                    "{:<12} {:>4} {:>10.2} {:>10.2}",
                    a.strategy, a.n, a.mean, a.std
                );
            }
            if let Some(dir) = out {
                commands::write_comparison(&aggregates, &dir)?;
            }
        }
        Command::Export { common, history } => {
            let cfg = load(&common, None)?;
            let dir = common.out.unwrap_or_else(|| cfg.output_dir.clone());
            let (scatter, curve) = commands::export(&cfg, &history, &dir)?;
            println!("wrote {} and {}", scatter.display(), curve.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::from(exit::SUCCESS),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit::code(&err))
        }
    }
}
