//! Stage orchestration across datasets and models.

use ilr_core::evaluation::Summary;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ModelName};
use crate::error::{CliError, CliResult};
use crate::stages::{Context, RunCounts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Simulate,
    Prepare,
    Tune,
    Train,
    Evaluate,
    Report,
}

/// First error in job order, so failures are reported deterministically.
fn all_ok(results: Vec<CliResult<()>>) -> CliResult<()> {
    results.into_iter().collect()
}

impl Context<'_> {
    pub fn run_stage(&self, stage: Stage, models: &[ModelName]) -> CliResult<Option<Summary>> {
        let datasets = self.config.all_datasets();
        let eval = &self.config.evaluation_datasets;
        let networks: Vec<_> = models.iter().filter_map(|m| m.variant()).collect();
        match stage {
            Stage::Simulate => all_ok(datasets.par_iter().map(|id| self.simulate(*id)).collect())?,
            Stage::Prepare => all_ok(datasets.par_iter().map(|id| self.prepare(*id)).collect())?,
            Stage::Tune => all_ok(networks.par_iter().map(|v| self.tune(*v)).collect())?,
            Stage::Train => {
                let jobs: Vec<_> = eval
                    .iter()
                    .flat_map(|id| networks.iter().map(move |v| (*id, *v)))
                    .collect();
                all_ok(jobs.par_iter().map(|(id, v)| self.train(*id, *v)).collect())?
            }
            Stage::Evaluate => {
                let jobs: Vec<_> = eval
                    .iter()
                    .flat_map(|id| models.iter().map(move |m| (*id, *m)))
                    .collect();
                all_ok(
                    jobs.par_iter()
                        .map(|(id, m)| self.evaluate(*id, *m))
                        .collect(),
                )?
            }
            Stage::Report => return self.report().map(Some),
        }
        Ok(None)
    }
}

pub struct PipelineOutcome {
    pub summary: Summary,
    pub counts: RunCounts,
}

/// Every stage in order for the configured models.
pub fn run_pipeline(config: &ExperimentConfig) -> CliResult<PipelineOutcome> {
    config.validate()?;
    let run = || -> CliResult<PipelineOutcome> {
        let ctx = Context::new(config);
        let mut summary = None;
        for stage in [
            Stage::Simulate,
            Stage::Prepare,
            Stage::Tune,
            Stage::Train,
            Stage::Evaluate,
            Stage::Report,
        ] {
            summary = ctx.run_stage(stage, &config.variants)?;
        }
        Ok(PipelineOutcome {
            summary: summary.expect("report stage returns a summary"),
            counts: ctx.stats.counts(),
        })
    };
    with_workers(config.workers, run)
}

/// Runs `f` on a pool of `workers` threads (0 keeps the global pool).
pub fn with_workers<T: Send>(
    workers: usize,
    f: impl FnOnce() -> CliResult<T> + Send,
) -> CliResult<T> {
    if workers == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::from(ilr_core::Error::config("workers", e.to_string())))?
        .install(f)
}
