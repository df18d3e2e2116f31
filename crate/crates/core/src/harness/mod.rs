//! Experiment plumbing: configs, datasets, output files and the runner.

pub mod check;
pub mod config;
pub mod data;
pub mod output;
pub mod run;

pub use config::{ExperimentConfig, Mode};
pub use data::Dataset;
pub use run::{exit_code, run_config, run_path, sample_checkpoint, RunOptions, RunReport};
