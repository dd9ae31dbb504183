//! The experiment commands, callable without the binary.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use imgep_core::env_sim::EnvVariant;
use imgep_core::evaluation::{
    self, ball_positions, exploration_curve, read_curve_csv, write_curve_csv,
};
use imgep_core::imgep::{run_exploration, ExplorationRun, RunSetup, Strategy};
use imgep_core::renderer::ImageDataset;
use imgep_core::representation::{self, train_with_progress, Representation};
use imgep_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset;
use crate::history::{read_scatter_rows, write_history};

pub const SUMMARY_FILE: &str = "summary.csv";

/// Overrides shared by the commands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces the config's seed list with this single seed.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub strategy: Option<Strategy>,
}

impl Overrides {
    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = cfg.clone();
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
            cfg.representation.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(strategy) = self.strategy {
            cfg.exploration.strategy = strategy;
        }
        cfg
    }
}

/// Renders `n` random scenes into a dataset file at `path`, seeded by the
/// first config seed.
pub fn gen_dataset(cfg: &ExperimentConfig, n: usize, path: &Path) -> Result<ImageDataset> {
    let seed = *cfg
        .seeds
        .first()
        .ok_or_else(|| anyhow!(Error::Argument("at least one seed is required".into())))?;
    let data = dataset::generate(&cfg.env, &cfg.render, n, seed)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    data.save(path)
        .with_context(|| format!("writing dataset {}", path.display()))?;
    Ok(data)
}

#[derive(Debug)]
pub struct TrainedRepresentation {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub output: representation::TrainOutput,
}

/// Trains the configured representation on a dataset file and writes
/// `checkpoint.bin` and `loss.csv` into the output directory.
pub fn train_repr(
    cfg: &ExperimentConfig,
    dataset_path: &Path,
    mut progress: impl FnMut(&representation::LossRecord),
) -> Result<TrainedRepresentation> {
    let data = ImageDataset::load(dataset_path)
        .with_context(|| format!("reading dataset {}", dataset_path.display()))?;
    let r = &cfg.representation;
    r.arch.validate()?;
    r.train.validate()?;
    let output = train_with_progress(&data, &r.arch, &r.train, |rec| progress(rec))?;
    fs::create_dir_all(&cfg.output_dir)?;
    let checkpoint = cfg.output_dir.join("checkpoint.bin");
    let loss_csv = cfg.output_dir.join("loss.csv");
    output.model.save(&checkpoint)?;
    representation::write_curve_csv(&output.curve, BufWriter::new(File::create(&loss_csv)?))?;
    Ok(TrainedRepresentation {
        checkpoint,
        loss_csv,
        output,
    })
}

/// One line of a run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub env: EnvVariant,
    pub seed: u64,
    pub final_coverage: usize,
    /// Curve file, relative to the summary's directory.
    pub curve: PathBuf,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    strategy: &'a str,
    env: EnvVariant,
    seed: u64,
    config_hash: &'a str,
    budget: usize,
    final_coverage: usize,
}

/// Directory of one strategy's runs.
pub fn strategy_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .join(cfg.exploration.strategy.name().to_ascii_lowercase())
}

pub fn load_representation(cfg: &ExperimentConfig) -> Result<Option<Representation>> {
    if !cfg.exploration.strategy.needs_representation() {
        return Ok(None);
    }
    let path = cfg.representation.checkpoint.as_ref().ok_or_else(|| {
        anyhow!(Error::Argument(
            "representation.checkpoint is not set".into()
        ))
    })?;
    let model = Representation::load(
        path,
        cfg.representation.arch.clone(),
        cfg.representation.train.precision,
    )
    .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Some(model))
}

/// Runs every seed of the config in turn. Each seed's files are written to a
/// scratch directory and renamed into place once complete, and the summary
/// is rewritten after every seed, so an interrupted run leaves exactly the
/// completed seeds behind.
pub fn run(
    cfg: &ExperimentConfig,
    mut on_seed: impl FnMut(&SummaryRow),
) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let model = load_representation(cfg)?;
    let dir = strategy_dir(cfg);
    fs::create_dir_all(&dir)?;
    cfg.save(&dir.join("config.toml"))?;
    let hash = cfg.hash()?;
    let dmp = cfg.dmp();
    let setup = RunSetup {
        env: &cfg.env,
        dmp: &dmp,
        render: &cfg.render,
        exploration: &cfg.exploration,
        representation: model.as_ref(),
        online: Some((&cfg.representation.arch, &cfg.representation.train)),
    };
    let summary_path = dir.join(SUMMARY_FILE);
    let mut rows = Vec::new();
    write_summary(&rows, &summary_path)?;
    for &seed in &cfg.seeds {
        let result = run_exploration(setup, seed)?;
        let row = persist_seed(cfg, &dir, &hash, &result)?;
        rows.push(row);
        write_summary(&rows, &summary_path)?;
        on_seed(rows.last().expect("just pushed"));
    }
    Ok(rows)
}

fn persist_seed(
    cfg: &ExperimentConfig,
    dir: &Path,
    hash: &str,
    run: &ExplorationRun,
) -> Result<SummaryRow> {
    let name = format!("seed-{}", run.seed);
    let scratch = dir.join(format!(".{name}.partial"));
    if scratch.exists() {
        fs::remove_dir_all(&scratch)?;
    }
    fs::create_dir_all(&scratch)?;
    write_history(
        &run.history,
        &cfg.env,
        BufWriter::new(File::create(scratch.join("history.csv"))?),
    )?;
    let curve = exploration_curve(
        &ball_positions(&run.history),
        cfg.evaluation.bounds,
        cfg.evaluation.bins,
    )?;
    write_curve_csv(
        &curve,
        BufWriter::new(File::create(scratch.join("curve.csv"))?),
    )?;
    let rows = evaluation::scatter_rows(&run.history, &cfg.env);
    evaluation::write_scatter_csv(
        &rows,
        BufWriter::new(File::create(scratch.join("scatter.csv"))?),
    )?;
    if let Some(model) = &run.online_model {
        model.save(&scratch.join("online_checkpoint.bin"))?;
    }
    let final_coverage = curve.last().copied().unwrap_or(0);
    let manifest = Manifest {
        strategy: run.strategy.name(),
        env: cfg.env.variant,
        seed: run.seed,
        config_hash: hash,
        budget: cfg.exploration.budget,
        final_coverage,
    };
    fs::write(scratch.join("manifest.toml"), toml::to_string(&manifest)?)?;
    let target = dir.join(&name);
    if target.exists() {
        fs::remove_dir_all(&target)?;
    }
    fs::rename(&scratch, &target)?;
    Ok(SummaryRow {
        strategy: run.strategy.name().to_string(),
        env: cfg.env.variant,
        seed: run.seed,
        final_coverage,
        curve: PathBuf::from(name).join("curve.csv"),
    })
}

fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        if rows.is_empty() {
            w.write_record(["strategy", "env", "seed", "final_coverage", "curve"])?;
        }
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rd = csv::Reader::from_path(path)
        .with_context(|| format!("reading summary {}", path.display()))?;
    let rows = rd.deserialize().collect::<Result<Vec<SummaryRow>, _>>()?;
    Ok(rows)
}

/// Final-coverage statistics of one strategy across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyAggregate {
    pub strategy: String,
    pub env: EnvVariant,
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Per-episode mean coverage over the seeds, truncated to the shortest
    /// curve.
    pub mean_curve: Vec<f64>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates summaries per strategy. Rows repeated across summaries count
/// once; strategies keep their order of first appearance.
pub fn compare(summaries: &[PathBuf]) -> Result<Vec<StrategyAggregate>> {
    if summaries.is_empty() {
        bail!(Error::Argument("compare needs at least one summary".into()));
    }
    let mut order: Vec<String> = Vec::new();
    let mut runs: BTreeMap<(String, u64), (SummaryRow, PathBuf)> = BTreeMap::new();
    let mut env: Option<EnvVariant> = None;
    for path in summaries {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for row in read_summary(path)? {
            if *env.get_or_insert(row.env) != row.env {
                bail!(Error::Argument(format!(
                    "summaries mix environments ({} and {})",
                    env.unwrap().name(),
                    row.env.name()
                )));
            }
            let key = (row.strategy.clone(), row.seed);
            if let Some((seen, _)) = runs.get(&key) {
                if seen.final_coverage != row.final_coverage {
                    bail!(Error::Argument(format!(
                        "{} seed {} appears with different coverages",
                        row.strategy, row.seed
                    )));
                }
                continue;
            }
            if !order.contains(&row.strategy) {
                order.push(row.strategy.clone());
            }
            let curve = base.join(&row.curve);
            runs.insert(key, (row, curve));
        }
    }
    let env = env.ok_or_else(|| anyhow!(Error::Argument("the summaries list no runs".into())))?;
    order
        .into_iter()
        .map(|strategy| {
            let group: Vec<_> = runs
                .values()
                .filter(|(r, _)| r.strategy == strategy)
                .collect();
            let finals: Vec<f64> = group.iter().map(|(r, _)| r.final_coverage as f64).collect();
            let (mean, std) = mean_std(&finals);
            let mut curves = Vec::with_capacity(group.len());
            for (_, path) in &group {
                let file = File::open(path)
                    .with_context(|| format!("reading curve {}", path.display()))?;
                curves.push(read_curve_csv(file)?);
            }
            let len = curves.iter().map(Vec::len).min().unwrap_or(0);
            let mean_curve = (0..len)
                .map(|i| curves.iter().map(|c| c[i] as f64).sum::<f64>() / curves.len() as f64)
                .collect();
            Ok(StrategyAggregate {
                strategy,
                env,
                n: group.len(),
                mean,
                std,
                mean_curve,
            })
        })
        .collect()
}

/// Writes `comparison.csv` and `mean_curves.csv` into `dir`.
pub fn write_comparison(aggregates: &[StrategyAggregate], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("comparison.csv"))?;
    w.write_record([
        "strategy",
        "env",
        "n",
        "mean_final_coverage",
        "std_final_coverage",
    ])?;
    for a in aggregates {
        w.write_record([
            a.strategy.clone(),
            a.env.name().to_string(),
            a.n.to_string(),
            a.mean.to_string(),
            a.std.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("mean_curves.csv"))?;
    let mut header = vec!["episode".to_string()];
    header.extend(aggregates.iter().map(|a| a.strategy.clone()));
    w.write_record(&header)?;
    let len = aggregates
        .iter()
        .map(|a| a.mean_curve.len())
        .max()
        .unwrap_or(0);
    for i in 0..len {
        let mut row = vec![(i + 1).to_string()];
        row.extend(
            aggregates
                .iter()
                .map(|a| a.mean_curve.get(i).map(f64::to_string).unwrap_or_default()),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Scatter and coverage curve of a saved history.
pub fn export(cfg: &ExperimentConfig, history: &Path, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let file =
        File::open(history).with_context(|| format!("reading history {}", history.display()))?;
    let rows = read_scatter_rows(file)?;
    Ok(evaluation::export(
        &rows,
        cfg.evaluation.bounds,
        cfg.evaluation.bins,
        dir,
    )?)
}
