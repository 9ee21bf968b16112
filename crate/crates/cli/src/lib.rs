//! File formats, commands and timing around `flowmamba_core`.
//!
//! Every subcommand of the `flowmamba` binary is a function in
//! [`commands`] taking an options struct, so the same code paths can be
//! driven from tests without spawning processes.

pub mod commands;
pub mod config;
pub mod error;
pub mod files;

pub use config::RunConfig;
pub use error::{CliError, Result};
