//! Versioned JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelSpec};
use super::ops::RunningStats;
use crate::calibration::SmearingFactor;
use crate::error::{Error, Result};
use crate::features::NormalisationStats;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub running: Vec<Option<RunningStats>>,
    pub normalisation: NormalisationStats,
    pub smearing: Option<SmearingFactor>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        normalisation: NormalisationStats,
        seed: u64,
        best_epoch: usize,
        best_val_loss: f64,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed,
            spec: model.spec.clone(),
            params: model.params.clone(),
            running: model.running.clone(),
            normalisation,
            smearing: None,
            best_epoch,
            best_val_loss,
        }
    }

    /// Rebuilds the model, checking the parameter count against the spec.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.spec.clone(), self.seed)?;
        if model.params.len() != self.params.len() || model.running.len() != self.running.len() {
            return Err(Error::Shape(
                "checkpoint parameters do not match its spec".into(),
            ));
        }
        model.params.clone_from(&self.params);
        model.running.clone_from(&self.running);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => Ok(serde_json::from_value(value)?),
            Some(v) => Err(Error::config(
                "version",
                format!("unsupported checkpoint version {v}"),
            )),
            None => Err(Error::config("version", "checkpoint has no version field")),
        }
    }
}
