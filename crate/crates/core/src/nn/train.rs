//! Mini-batch training with early stopping on validation loss.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelSpec};
use super::ops::Mode;
use super::optim::{AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::features::EncodedObservation;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        TrainingConfig {
            learning_rate: a.lr,
            batch_size: 512,
            max_epochs: 200,
            patience: 5,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.max_epochs < 1 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingResult {
    pub model: Model,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
}

/// Batch boundaries for `n` samples; a trailing batch of one row is merged
/// into its predecessor so batch norm always sees at least two rows.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("len > 1");
        out.last_mut().expect("len > 1").end = last.end;
    }
    out
}

/// Mean squared error in evaluation mode.
pub fn evaluate_loss(model: &Model, samples: &[EncodedObservation]) -> Result<f64> {
    let preds = model.predict(samples)?;
    Ok(preds
        .iter()
        .zip(samples)
        .map(|(p, s)| (p - s.target).powi(2))
        .sum::<f64>()
        / samples.len() as f64)
}

/// Trains from a fresh initialisation. Epoch `e` shuffles with stream `e` of
/// the training seed; dropout uses a separate derived stream.
pub fn train_model(
    spec: ModelSpec,
    train: &[EncodedObservation],
    validation: &[EncodedObservation],
    config: &TrainingConfig,
) -> Result<TrainingResult> {
    config.validate()?;
    if train.len() < 2 {
        return Err(Error::config(
            "train",
            "need at least two training observations",
        ));
    }
    if validation.is_empty() {
        return Err(Error::config(
            "validation",
            "need at least one validation observation",
        ));
    }
    let mut model = Model::new(spec, rng::derive_seed(config.seed, "init"))?;
    let mut opt = AdamW::new(config.adamw(), model.n_params());
    let mut dropout_rng = rng::stream(rng::derive_seed(config.seed, "dropout"), 0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, epoch as u64));
        let mut total = 0.0;
        for range in batch_ranges(order.len(), config.batch_size) {
            let batch: Vec<&EncodedObservation> =
                order[range.clone()].iter().map(|i| &train[*i]).collect();
            let g = model.loss_and_gradient(&batch, Some(&mut dropout_rng))?;
            if !g.loss.is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            total += g.loss * range.len() as f64;
            opt.step(&mut model.params, &g.grad);
            model.update_running(&g.moments);
        }
        train_losses.push(total / train.len() as f64);
        let val = evaluate_loss(&model, validation)?;
        val_losses.push(val);
        if val < best.0 {
            best = (val, epoch, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let epochs_run = val_losses.len();
    let (best_val_loss, best_epoch, model) = best;
    if best_epoch == 0 {
        return Err(Error::Domain("validation loss never finite".into()));
    }
    Ok(TrainingResult {
        model,
        train_losses,
        val_losses,
        best_epoch,
        best_val_loss,
        epochs_run,
    })
}

/// Training-mode loss of a batch, for diagnostics.
pub fn batch_loss(model: &Model, batch: &[&EncodedObservation]) -> Result<f64> {
    model.loss_with(&model.params, batch, Mode::Train)
}
