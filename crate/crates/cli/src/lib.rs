//! Command-line driver for the pose-graph back-end.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod plot;

pub use commands::{execute, Cli, Command};
pub use error::{CliError, ExitStatus};
