//! Command-line driver: corpus generation, segmentation, sweeps, statistics
//! and evaluation on top of `step-core`.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod scenes;
pub mod segment;
pub mod sweep;

pub use cli::{run, Cli};
pub use error::CliError;
