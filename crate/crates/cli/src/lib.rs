//! Command-line layer: checkpoints, MNIST ingestion, reports and subcommands.

pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod mnist;
pub mod report;

pub use error::CliError;
