//! Run configuration and subcommands of the `dfg` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_export, cmd_pretrain, cmd_sweep, cmd_train, ExportKind};
pub use config::RunConfig;
pub use error::{CliError, Result};
