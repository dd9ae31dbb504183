//! Experiment orchestration for goal exploration: TOML configs, dataset
//! generation, representation pre-training, seeded exploration runs with
//! crash-safe outputs, and cross-seed comparison.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod exit;
pub mod history;

pub use commands::{
    compare, export, gen_dataset, run, train_repr, Overrides, StrategyAggregate, SummaryRow,
};
pub use config::{EvaluationConfig, ExperimentConfig, RepresentationConfig};
