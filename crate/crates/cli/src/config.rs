//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use imgep_core::dmp::DmpConfig;
use imgep_core::env_sim::{EnvConfig, EnvVariant};
use imgep_core::evaluation::DEFAULT_BINS;
use imgep_core::imgep::{ExplorationConfig, Strategy};
use imgep_core::renderer::RenderConfig;
use imgep_core::representation::{Precision, TrainConfig, VaeArchitecture};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    /// Defaults to the standard primitives for `env.episode_steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dmp: Option<DmpConfig>,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub representation: RepresentationConfig,
    #[serde(default)]
    pub exploration: ExplorationConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepresentationConfig {
    pub arch: VaeArchitecture,
    pub train: TrainConfig,
    /// Trained weights used by RGE-VAE and MGE-VAE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        Self {
            arch: VaeArchitecture::desk(),
            train: TrainConfig {
                precision: Precision::F32,
                ..TrainConfig::desk(0)
            },
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub bins: usize,
    /// Ball coverage box, `[[x_min, x_max], [y_min, y_max]]`.
    pub bounds: [[f64; 2]; 2],
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            bounds: [[-1.0, 1.0], [-1.0, 1.0]],
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for an environment.
    pub fn for_variant(variant: EnvVariant) -> Self {
        Self {
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("runs"),
            env: EnvConfig::for_variant(variant),
            dmp: None,
            render: RenderConfig::default(),
            representation: RepresentationConfig::default(),
            exploration: ExplorationConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)
            .with_context(|| format!("writing config {}", path.display()))
    }

    /// Hex SHA-256 of the serialized config.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn dmp(&self) -> DmpConfig {
        self.dmp
            .clone()
            .unwrap_or_else(|| DmpConfig::standard(self.env.episode_steps))
    }

    /// Checks every block the configured strategy needs.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!(imgep_core::Error::Argument(
                "at least one seed is required".into()
            ));
        }
        self.env.validate()?;
        self.dmp().validate(self.env.episode_steps)?;
        self.render.validate()?;
        self.exploration.validate()?;
        let strategy = self.exploration.strategy;
        if strategy.needs_representation() || strategy == Strategy::RgeOnline {
            self.representation.arch.validate()?;
            self.representation.train.validate()?;
            if self.representation.arch.image_size != self.render.resolution {
                bail!(imgep_core::Error::Argument(format!(
                    "representation expects {} px images but the renderer draws {} px",
                    self.representation.arch.image_size, self.render.resolution
                )));
            }
        }
        if strategy.needs_representation() && self.representation.checkpoint.is_none() {
            bail!(imgep_core::Error::Argument(format!(
                "{strategy} needs representation.checkpoint"
            )));
        }
        imgep_core::evaluation::CoverageGrid::new(self.evaluation.bounds, self.evaluation.bins)?;
        Ok(())
    }
}
