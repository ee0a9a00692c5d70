//! Experiment driver for GP state-space models: configuration files,
//! training runs, result records, benchmark tables and prediction export.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod table;

pub use config::{ExperimentConfig, Overrides};
pub use error::CliError;
