//! Central finite-difference gradients for verifying the analytic backward pass.

use super::model::Model;
use super::ops::Mode;
use crate::error::Result;
use crate::features::EncodedObservation;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor for relative errors of near-zero gradients.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// Training-mode loss gradient by central differences, one parameter at a time.
pub fn numerical_gradient(
    model: &Model,
    batch: &[&EncodedObservation],
    step: f64,
) -> Result<Vec<f64>> {
    let mut p = model.params.clone();
    let mut out = Vec::with_capacity(p.len());
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + step;
        let up = model.loss_with(&p, batch, Mode::Train)?;
        p[k] = orig - step;
        let down = model.loss_with(&p, batch, Mode::Train)?;
        p[k] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Largest relative error over the parameter indices in `range`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], range: std::ops::Range<usize>) -> f64 {
    range
        .map(|k| relative_error(analytic[k], numeric[k]))
        .fold(0.0, f64::max)
}

/// Analytic gradient of the same loss, for comparison.
pub fn analytic_gradient(model: &Model, batch: &[&EncodedObservation]) -> Result<Vec<f64>> {
    let tape = model.forward(&model.params, batch, Mode::Train, None)?;
    Ok(model.backward(&model.params, batch, &tape))
}
