//! Experiment harness around `hra-core`: JSON configs, checkpoints, reports,
//! the growth-curve and ablation sweeps, and the `hra-lab` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
