//! Experiment harness around `vac-core`: configuration, file outputs and the
//! `vac` subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{DataSource, ExperimentConfig, Overrides, Preset};
pub use error::{CliError, CliResult};
