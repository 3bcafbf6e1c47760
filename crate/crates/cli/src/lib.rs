//! Command line front end for the `mtdti-core` affinity model: config
//! handling, dataset and candidate files, cross-validation and ranking.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod rank;

pub use commands::{main_with_args, run, Cli};
pub use error::{CliError, CliResult};
