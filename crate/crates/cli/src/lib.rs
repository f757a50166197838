//! File formats, settings and subcommands of the `aodret` tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod textio;

pub use error::{CliError, CliResult};
