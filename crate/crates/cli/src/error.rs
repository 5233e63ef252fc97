use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing output of stage `{stage}`: {path} (run `ilr {stage}` first)")]
    Dependency { stage: &'static str, path: PathBuf },
    #[error("stage `{stage}` failed{}: {source}", dataset.map(|d| format!(" on dataset {d}")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        dataset: Option<u32>,
        #[source]
        source: Box<CliError>,
    },
    #[error(transparent)]
    Core(#[from] ilr_core::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn in_stage(self, stage: &'static str, dataset: Option<u32>) -> Self {
        match self {
            e @ CliError::Stage { .. } => e,
            e => CliError::Stage {
                stage,
                dataset,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, skipping stage tags.
    pub fn root(&self) -> &CliError {
        match self {
            CliError::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
