//! Experiment orchestration for `ttasv`: a TOML config drives
//! segment → synthesize → embed → fuse → score → report, and every stage is
//! also available as its own subcommand.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod util;

pub use config::ExperimentConfig;
pub use error::CliError;
