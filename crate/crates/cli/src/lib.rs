//! Experiment orchestration: configuration, content-addressed stages and the
//! end-to-end pipeline behind the `ilr` binary.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod stages;

pub use config::{ExperimentConfig, ModelName, Profile};
pub use error::{CliError, CliResult};
pub use pipeline::{run_pipeline, PipelineOutcome, Stage};
pub use stages::{Context, Layout, RunCounts};
