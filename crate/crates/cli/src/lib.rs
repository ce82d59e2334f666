//! Command-line front end: JSON run configs, `PBT1` tensor files and the
//! `featborrow` subcommands.

pub mod commands;
pub mod config;
pub mod selfcheck;
pub mod tensorfile;

pub use commands::{run, EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_OK};
pub use config::{parse_config, RunConfig};
pub use tensorfile::TensorFile;
