//! Experiment runner: JSON configs in, CSV series and a `manifest.json`
//! summary out. One experiment per process invocation.

pub mod config;
pub mod manifest;
pub mod report;
pub mod runner;

pub use config::ExperimentConfig;
pub use manifest::Manifest;
pub use runner::{run_config_path, run_config_str, RunError, OUTPUT_ROOT_ENV};
