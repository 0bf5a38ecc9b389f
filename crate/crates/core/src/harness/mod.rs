//! End-to-end orchestration: model text, training, data, compilation,
//! evaluation and reports.

pub mod data;
pub mod dsl;
pub mod experiment;
pub mod metrics;
pub mod tokens;
pub mod train;

pub use experiment::{run_experiment, Build, ExperimentConfig, Experiment, Report};
