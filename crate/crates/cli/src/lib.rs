//! Command implementations behind the `rswin` binary.

pub mod commands;
pub mod error;
pub mod run_config;

pub use error::{CliError, CliResult};
pub use run_config::RunConfig;
