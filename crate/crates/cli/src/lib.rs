//! The `deepperson` command-line tool: train, evaluate, extract descriptors,
//! draw heatmaps and generate synthetic datasets.

pub mod commands;
pub mod config;
pub mod error;
pub mod format;

pub use error::CliError;
