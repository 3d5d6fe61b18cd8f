//! Experiment orchestration around `anfr-core`: configuration, runs,
//! sweeps, reports and binary checkpoints.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod metrics;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::{load_config, parse_config, ExperimentConfig};
pub use error::{HarnessError, Result};
