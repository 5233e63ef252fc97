//! Individual-claims loss reserving laboratory.
//!
//! The crate is organised as a pipeline:
//!
//! * [`simulator`] generates synthetic portfolios of claims with payment and
//!   case-estimate histories.
//! * [`dataset`] expands claims into per-quarter observations and assigns
//!   train/validation/test splits.
//! * [`features`] turns observations into network inputs and targets.
//! * [`nn`] is a small neural-network engine (dense, RNN, LSTM, embeddings,
//!   batch/layer norm, dropout, AdamW, early stopping).
//! * [`calibration`] applies the smearing retransformation to log predictions.
//! * [`evaluation`] computes reserving metrics and breakdown tables.
//! * [`tuning`] runs the hyperparameter grid search.

pub mod calibration;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod nn;
pub mod rng;
pub mod simulator;
pub mod tuning;

pub use error::{Error, Result};
