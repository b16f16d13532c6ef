//! Command-line front end for `sphereflow`: the `v1` configuration schema,
//! the trajectory/metrics/report file formats, and the subcommands.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use cli::Cli;
pub use error::{CliError, CliResult};
