//! Command-line experiment runner: configuration, the three experiments,
//! metrics, checkpoints and SVG figures.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod digits;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod svg;

pub use config::{Experiment, ExperimentConfig, ModelName};
pub use error::{CliError, Result};
pub use metrics::MetricsRecord;
