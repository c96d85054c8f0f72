//! Library half of the `geoadam` binary: configuration, argument parsing
//! and the subcommands.

pub mod args;
pub mod commands;
pub mod config;

pub use config::{DatasetKind, Precision, RunConfig, OUTPUT_DIR_ENV};
