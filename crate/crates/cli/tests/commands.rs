//! Command behaviour through the library entry points.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use imgep_cli::commands::{self, mean_std, read_summary, Overrides, SUMMARY_FILE};
use imgep_cli::dataset::generate_scenes;
use imgep_cli::history::read_scatter_rows;
use imgep_cli::{exit, ExperimentConfig};
use imgep_core::env_sim::{polar_angle, EnvVariant};
use imgep_core::evaluation::{coverage, read_curve_csv};
use imgep_core::imgep::Strategy;
use imgep_core::renderer::ImageDataset;
use imgep_core::representation::{Precision, Representation, VaeArchitecture};

fn small(variant: EnvVariant, strategy: Strategy, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_variant(variant);
    cfg.seeds = vec![0, 1, 2];
    cfg.output_dir = out.to_path_buf();
    cfg.exploration.strategy = strategy;
    cfg.exploration.budget = 150;
    cfg.exploration.bootstrap = 30;
    cfg
}

fn tiny_repr(cfg: &mut ExperimentConfig) {
    cfg.render.resolution = 16;
    cfg.render.ball_radius_px = 2.0;
    cfg.render.distractor_radius_px = 1.5;
    cfg.representation.arch = VaeArchitecture {
        image_size: 16,
        conv_layers: 2,
        channels: 4,
        dense_layers: 1,
        dense_units: 16,
        latent_dim: 4,
        beta: 1.0,
    };
    cfg.representation.train.batch_size = 8;
    cfg.representation.train.iterations = 300;
}

fn workspace_configs() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    files
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    let files = workspace_configs();
    assert!(files.len() >= 4);
    for path in files {
        let cfg = ExperimentConfig::load(&path).unwrap();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg, "{}", path.display());
        if !cfg.exploration.strategy.needs_representation() {
            cfg.validate().unwrap();
        }
    }
}

#[test]
fn config_hash_tracks_content() {
    let a = ExperimentConfig::for_variant(EnvVariant::ArmBall);
    let mut b = a.clone();
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    b.exploration.noise_sigma = 0.1;
    assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    assert_eq!(a.hash().unwrap().len(), 64);
}

#[test]
fn unknown_fields_are_config_errors() {
    let mut text = ExperimentConfig::for_variant(EnvVariant::ArmBall)
        .to_toml()
        .unwrap();
    text = text.replace("[exploration]", "[exploration]\nbudgets = 3");
    let err = toml::from_str::<ExperimentConfig>(&text).unwrap_err();
    assert_eq!(exit::code(&anyhow::Error::from(err)), exit::CONFIG);
}

#[test]
fn vae_strategies_need_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(EnvVariant::ArmBall, Strategy::RgeVae, dir.path());
    let err = commands::run(&cfg, |_| {}).unwrap_err();
    assert_eq!(exit::code(&err), exit::CONFIG);
    assert!(
        !dir.path().join("rge-vae").exists(),
        "nothing is written before validation"
    );
}

#[test]
fn datasets_have_the_requested_size_and_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(EnvVariant::Arm2Balls, Strategy::Rpe, dir.path());
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    commands::gen_dataset(&cfg, 100, &a).unwrap();
    commands::gen_dataset(&cfg, 100, &b).unwrap();
    let bytes = fs::read(&a).unwrap();
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 100);
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(ImageDataset::load(&a).unwrap().len(), 100);
    let other = Overrides {
        seed: Some(9),
        ..Default::default()
    }
    .apply(&cfg);
    commands::gen_dataset(&other, 100, &b).unwrap();
    assert_ne!(bytes, fs::read(&b).unwrap());
}

/// Chi-square statistic of `values` in `[lo, hi)` against 10 equal bins.
fn chi_square(values: &[f64], lo: f64, hi: f64) -> f64 {
    let mut counts = [0usize; 10];
    for v in values {
        counts[(((v - lo) / (hi - lo) * 10.0) as usize).min(9)] += 1;
    }
    let expected = values.len() as f64 / 10.0;
    counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum()
}

#[test]
fn object_positions_are_uniform() {
    // 99th percentile of chi-square with 9 degrees of freedom
    const CRITICAL: f64 = 21.666;
    let cfg = ExperimentConfig::for_variant(EnvVariant::ArmBall);
    let scenes = generate_scenes(&cfg.env, &cfg.render, 10_000, 0).unwrap();
    assert!(scenes
        .iter()
        .all(|s| (s.ball_pos[0].hypot(s.ball_pos[1]) - 0.6).abs() < 1e-12));
    let phis: Vec<f64> = scenes.iter().map(|s| polar_angle(s.ball_pos)).collect();
    assert!(chi_square(&phis, 0.0, TAU) < CRITICAL);

    let cfg = ExperimentConfig::for_variant(EnvVariant::Arm2Balls);
    let scenes = generate_scenes(&cfg.env, &cfg.render, 10_000, 0).unwrap();
    for pick in [
        |s: &imgep_core::env_sim::SceneState| s.ball_pos[0],
        |s: &imgep_core::env_sim::SceneState| s.ball_pos[1],
        |s: &imgep_core::env_sim::SceneState| s.distractor_pos.unwrap()[0],
        |s: &imgep_core::env_sim::SceneState| s.distractor_pos.unwrap()[1],
    ] {
        let v: Vec<f64> = scenes.iter().map(pick).collect();
        assert!(chi_square(&v, -1.0, 1.0) < CRITICAL);
    }
}

#[test]
fn training_writes_reloadable_checkpoint_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(
        EnvVariant::ArmBall,
        Strategy::RgeVae,
        &dir.path().join("repr"),
    );
    tiny_repr(&mut cfg);
    let data_path = dir.path().join("data.bin");
    let data = commands::gen_dataset(&cfg, 64, &data_path).unwrap();
    let mut logged = 0;
    let trained = commands::train_repr(&cfg, &data_path, |_| logged += 1).unwrap();
    assert_eq!(logged, 3);
    let rows = fs::read_to_string(&trained.loss_csv)
        .unwrap()
        .lines()
        .count()
        - 1;
    assert_eq!(rows, 300 / 100);
    let reloaded = Representation::load(
        &trained.checkpoint,
        cfg.representation.arch.clone(),
        Precision::F32,
    )
    .unwrap();
    assert_eq!(
        reloaded.embed_all(&data.images).unwrap(),
        trained.output.model.embed_all(&data.images).unwrap()
    );

    let err = commands::train_repr(&cfg, &dir.path().join("missing.bin"), |_| {}).unwrap_err();
    assert_eq!(exit::code(&err), exit::IO);
}

#[test]
fn learned_goal_runs_use_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(
        EnvVariant::ArmBall,
        Strategy::MgeVae,
        &dir.path().join("repr"),
    );
    tiny_repr(&mut cfg);
    cfg.representation.train.iterations = 100;
    let data_path = dir.path().join("data.bin");
    commands::gen_dataset(&cfg, 32, &data_path).unwrap();
    let trained = commands::train_repr(&cfg, &data_path, |_| {}).unwrap();
    cfg.representation.checkpoint = Some(trained.checkpoint);
    cfg.output_dir = dir.path().join("runs");
    cfg.seeds = vec![4];
    let rows = commands::run(&cfg, |_| {}).unwrap();
    assert_eq!(rows.len(), 1);
    let history = fs::read_to_string(dir.path().join("runs/mge-vae/seed-4/history.csv")).unwrap();
    // goals live in a two-latent module, never the whole latent space
    let header = history.lines().next().unwrap();
    assert!(header.contains("goal_1") && !header.contains("goal_2"));
}

#[test]
fn run_writes_per_seed_files_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(EnvVariant::Arm2Balls, Strategy::MgeEfr, dir.path());
    let mut seen = Vec::new();
    let rows = commands::run(&cfg, |r| seen.push(r.seed)).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    let root = dir.path().join("mge-efr");
    for seed in 0..3 {
        for file in ["history.csv", "curve.csv", "scatter.csv", "manifest.toml"] {
            assert!(
                root.join(format!("seed-{seed}/{file}")).is_file(),
                "seed {seed} {file}"
            );
        }
    }
    let summary = read_summary(&root.join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary, rows);
    assert!(root.join("config.toml").is_file());

    for row in &summary {
        let seed_dir = root.join(format!("seed-{}", row.seed));
        let balls: Vec<[f64; 2]> =
            read_scatter_rows(fs::File::open(seed_dir.join("history.csv")).unwrap())
                .unwrap()
                .iter()
                .map(|r| r.ball)
                .collect();
        assert_eq!(balls.len(), 150);
        assert_eq!(
            coverage(&balls, cfg.evaluation.bounds, 30).unwrap(),
            row.final_coverage
        );
        let manifest = fs::read_to_string(seed_dir.join("manifest.toml")).unwrap();
        assert!(manifest.contains(&cfg.hash().unwrap()));
    }

    let first = fs::read(root.join(SUMMARY_FILE)).unwrap();
    let history = fs::read(root.join("seed-1/history.csv")).unwrap();
    commands::run(&cfg, |_| {}).unwrap();
    assert_eq!(fs::read(root.join(SUMMARY_FILE)).unwrap(), first);
    assert_eq!(fs::read(root.join("seed-1/history.csv")).unwrap(), history);
}

#[test]
fn interrupted_runs_keep_completed_seeds_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(EnvVariant::ArmBall, Strategy::RgeEfr, dir.path());
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        commands::run(&cfg, |row| {
            if row.seed == 1 {
                panic!("interrupted");
            }
        })
    }));
    assert!(outcome.is_err());
    let root = dir.path().join("rge-efr");
    let summary = read_summary(&root.join(SUMMARY_FILE)).unwrap();
    assert_eq!(
        summary.iter().map(|r| r.seed).collect::<Vec<_>>(),
        vec![0, 1]
    );
    let mut dirs: Vec<String> = fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("seed-"))
        .collect();
    dirs.sort();
    assert_eq!(dirs, vec!["seed-0", "seed-1"]);
}

#[test]
fn export_reproduces_the_run_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(EnvVariant::Arm2Balls, Strategy::RgeEfr, dir.path());
    let cfg = Overrides {
        seed: Some(5),
        ..Default::default()
    }
    .apply(&cfg);
    commands::run(&cfg, |_| {}).unwrap();
    let seed_dir = dir.path().join("rge-efr/seed-5");
    let (scatter, curve) = commands::export(
        &cfg,
        &seed_dir.join("history.csv"),
        &dir.path().join("export"),
    )
    .unwrap();
    assert_eq!(
        fs::read(curve).unwrap(),
        fs::read(seed_dir.join("curve.csv")).unwrap()
    );
    assert_eq!(
        fs::read(scatter).unwrap(),
        fs::read(seed_dir.join("scatter.csv")).unwrap()
    );
}

fn fake_summary(dir: &Path, env: &str, rows: &[(&str, u64, usize)]) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let mut text = String::from("strategy,env,seed,final_coverage,curve\n");
    for (strategy, seed, cov) in rows {
        let curve = format!("curve-{strategy}-{seed}.csv");
        fs::write(
            dir.join(&curve),
            format!("episode,cells_occupied\n1,1\n2,{cov}\n"),
        )
        .unwrap();
        text.push_str(&format!("{strategy},{env},{seed},{cov},{curve}\n"));
    }
    let path = dir.join("summary.csv");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn compare_aggregates_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let one = fake_summary(&dir.path().join("one"), "arm_ball", &[("RPE", 0, 10)]);
    let agg = commands::compare(std::slice::from_ref(&one)).unwrap();
    assert_eq!((agg[0].n, agg[0].mean, agg[0].std), (1, 10.0, 0.0));

    let two = fake_summary(
        &dir.path().join("two"),
        "arm_ball",
        &[("RPE", 0, 10), ("RPE", 1, 20), ("RGE-EFR", 0, 30)],
    );
    let agg = commands::compare(std::slice::from_ref(&two)).unwrap();
    assert_eq!(agg[0].strategy, "RPE");
    assert_eq!((agg[0].n, agg[0].mean, agg[0].std), (2, 15.0, 5.0));
    assert_eq!(agg[0].mean_curve, vec![1.0, 15.0]);
    assert_eq!(agg[1].mean, 30.0);

    let thrice = commands::compare(&[two.clone(), two.clone(), two.clone()]).unwrap();
    assert_eq!(thrice, agg);

    let other = fake_summary(&dir.path().join("other"), "arm2_balls", &[("RPE", 0, 10)]);
    let err = commands::compare(&[two, other]).unwrap_err();
    assert_eq!(exit::code(&err), exit::CONFIG);

    commands::write_comparison(&agg, &dir.path().join("cmp")).unwrap();
    let table = fs::read_to_string(dir.path().join("cmp/comparison.csv")).unwrap();
    assert!(table.contains("RPE,arm_ball,2,15,5"));
    let curves =
        read_curve_csv(fs::File::open(dir.path().join("one/curve-RPE-0.csv")).unwrap()).unwrap();
    assert_eq!(curves, vec![1, 10]);
}

#[test]
fn population_std() {
    assert_eq!(mean_std(&[10.0, 20.0]), (15.0, 5.0));
    assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
}
