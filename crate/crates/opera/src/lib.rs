//! File formats, experiment configs and subcommands of the `opera` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;

pub use error::{CliError, CliResult};
