//! Layer primitives: dense, vanilla RNN and LSTM cells, embeddings,
//! normalisation, dropout and the MSE loss.
//!
//! The slice kernels here are the ones the full model runs; the `*_forward`
//! functions wrap them with shape checks for standalone use.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::LabRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// `out += W x` for a `rows x cols` row-major `w`.
pub(crate) fn matvec_add(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (row, o) in w.chunks_exact(cols).zip(out.iter_mut()) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dx += W^T dy`.
pub(crate) fn matvec_t_add(w: &[f64], cols: usize, dy: &[f64], dx: &mut [f64]) {
    for (row, d) in w.chunks_exact(cols).zip(dy) {
        if *d == 0.0 {
            continue;
        }
        for (g, a) in dx.iter_mut().zip(row) {
            *g += a * d;
        }
    }
}

/// `dW += dy x^T`.
pub(crate) fn outer_add(dw: &mut [f64], cols: usize, dy: &[f64], x: &[f64]) {
    for (row, d) in dw.chunks_exact_mut(cols).zip(dy) {
        if *d == 0.0 {
            continue;
        }
        for (g, a) in row.iter_mut().zip(x) {
            *g += d * a;
        }
    }
}

fn check(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what}: expected {expected}, got {got}"
        )))
    }
}

/// `activation(W z + b)`.
pub fn dense_forward(z: &[f64], w: &Matrix, b: &[f64], activation: Activation) -> Result<Vec<f64>> {
    check("dense input", w.cols, z.len())?;
    check("dense bias", w.rows, b.len())?;
    let mut out = b.to_vec();
    matvec_add(&w.data, w.cols, z, &mut out);
    Ok(out.into_iter().map(|a| activation.apply(a)).collect())
}

/// `activation(W_hh h_prev + W_xh x + b)`.
pub fn rnn_cell_forward(
    h_prev: &[f64],
    x: &[f64],
    w_hh: &Matrix,
    w_xh: &Matrix,
    b: &[f64],
    activation: Activation,
) -> Result<Vec<f64>> {
    check("rnn recurrent weights rows", b.len(), w_hh.rows)?;
    check("rnn recurrent weights cols", h_prev.len(), w_hh.cols)?;
    check("rnn input weights rows", b.len(), w_xh.rows)?;
    check("rnn input", w_xh.cols, x.len())?;
    let mut out = vec![0.0; b.len()];
    rnn_step(&w_xh.data, &w_hh.data, b, h_prev, x, &mut out, activation);
    Ok(out)
}

pub(crate) fn rnn_step(
    wx: &[f64],
    wh: &[f64],
    b: &[f64],
    h_prev: &[f64],
    x: &[f64],
    out: &mut [f64],
    activation: Activation,
) {
    out.copy_from_slice(b);
    matvec_add(wh, h_prev.len(), h_prev, out);
    matvec_add(wx, x.len(), x, out);
    for v in out.iter_mut() {
        *v = activation.apply(*v);
    }
}

/// The four LSTM gates with separate input and recurrent matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmGateParams {
    pub w_hf: Matrix,
    pub w_xf: Matrix,
    pub w_hi: Matrix,
    pub w_xi: Matrix,
    pub w_hg: Matrix,
    pub w_xg: Matrix,
    pub w_ho: Matrix,
    pub w_xo: Matrix,
    pub b_f: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_g: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl LstmGateParams {
    pub fn zeros(units: usize, inputs: usize) -> Self {
        LstmGateParams {
            w_hf: Matrix::zeros(units, units),
            w_xf: Matrix::zeros(units, inputs),
            w_hi: Matrix::zeros(units, units),
            w_xi: Matrix::zeros(units, inputs),
            w_hg: Matrix::zeros(units, units),
            w_xg: Matrix::zeros(units, inputs),
            w_ho: Matrix::zeros(units, units),
            w_xo: Matrix::zeros(units, inputs),
            b_f: vec![0.0; units],
            b_i: vec![0.0; units],
            b_g: vec![0.0; units],
            b_o: vec![0.0; units],
        }
    }

    pub fn units(&self) -> usize {
        self.b_f.len()
    }

    pub fn inputs(&self) -> usize {
        self.w_xf.cols
    }

    /// Gate-stacked `(W_x, W_h, b)` in forget, input, candidate, output order.
    pub fn stacked(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let wx = [&self.w_xf, &self.w_xi, &self.w_xg, &self.w_xo]
            .iter()
            .flat_map(|m| m.data.iter().copied())
            .collect();
        let wh = [&self.w_hf, &self.w_hi, &self.w_hg, &self.w_ho]
            .iter()
            .flat_map(|m| m.data.iter().copied())
            .collect();
        let b = [&self.b_f, &self.b_i, &self.b_g, &self.b_o]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect();
        (wx, wh, b)
    }

    pub fn from_stacked(units: usize, inputs: usize, wx: &[f64], wh: &[f64], b: &[f64]) -> Self {
        let mx = |g: usize| Matrix {
            rows: units,
            cols: inputs,
            data: wx[g * units * inputs..(g + 1) * units * inputs].to_vec(),
        };
        let mh = |g: usize| Matrix {
            rows: units,
            cols: units,
            data: wh[g * units * units..(g + 1) * units * units].to_vec(),
        };
        let bv = |g: usize| b[g * units..(g + 1) * units].to_vec();
        LstmGateParams {
            w_xf: mx(0),
            w_xi: mx(1),
            w_xg: mx(2),
            w_xo: mx(3),
            w_hf: mh(0),
            w_hi: mh(1),
            w_hg: mh(2),
            w_ho: mh(3),
            b_f: bv(0),
            b_i: bv(1),
            b_g: bv(2),
            b_o: bv(3),
        }
    }
}

/// Post-nonlinearity gate values and states of one LSTM step.
#[derive(Debug, Clone, Default)]
pub(crate) struct LstmStep {
    /// `[f, i, g, o]` stacked, each of length `units`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

pub(crate) fn lstm_step(
    wx: &[f64],
    wh: &[f64],
    b: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    x: &[f64],
) -> LstmStep {
    let units = c_prev.len();
    let mut gates = b.to_vec();
    matvec_add(wh, units, h_prev, &mut gates);
    matvec_add(wx, x.len(), x, &mut gates);
    for (k, v) in gates.iter_mut().enumerate() {
        *v = if k / units == 2 {
            v.tanh()
        } else {
            sigmoid(*v)
        };
    }
    let mut c = vec![0.0; units];
    let mut tanh_c = vec![0.0; units];
    let mut h = vec![0.0; units];
    for j in 0..units {
        let (f, i, g, o) = (
            gates[j],
            gates[units + j],
            gates[2 * units + j],
            gates[3 * units + j],
        );
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
    LstmStep {
        gates,
        c,
        tanh_c,
        h,
    }
}

/// One LSTM step: returns `(h_t, c_t)`.
pub fn lstm_cell_forward(
    h_prev: &[f64],
    c_prev: &[f64],
    x: &[f64],
    params: &LstmGateParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let units = params.units();
    check("lstm hidden state", units, h_prev.len())?;
    check("lstm cell state", units, c_prev.len())?;
    check("lstm input", params.inputs(), x.len())?;
    for m in [&params.w_hf, &params.w_hi, &params.w_hg, &params.w_ho] {
        check("lstm recurrent weights", units * units, m.rows * m.cols)?;
    }
    for m in [&params.w_xf, &params.w_xi, &params.w_xg, &params.w_xo] {
        check("lstm input weights", units * x.len(), m.rows * m.cols)?;
    }
    for v in [&params.b_i, &params.b_g, &params.b_o] {
        check("lstm bias", units, v.len())?;
    }
    let (wx, wh, b) = params.stacked();
    let step = lstm_step(&wx, &wh, &b, h_prev, c_prev, x);
    Ok((step.h, step.c))
}

/// Row `index` of the table; anything past the end reads the last
/// (reserved) row.
pub fn embedding_lookup(index: usize, table: &Matrix) -> Vec<f64> {
    table.row(index.min(table.rows - 1)).to_vec()
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = BATCH_NORM_MOMENTUM;
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Batch-normalisation layer state for standalone use.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running: RunningStats,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running: RunningStats::new(features),
        }
    }
}

/// Per-feature population mean and variance of a `batch x features` matrix.
pub(crate) fn batch_moments(x: &[f64], features: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / features) as f64;
    let mut mean = vec![0.0; features];
    for row in x.chunks_exact(features) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; features];
    for row in x.chunks_exact(features) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

/// Normalises each feature over the batch (training) or with the running
/// statistics (evaluation), then applies the scale and shift. Training mode
/// updates the running statistics.
pub fn batch_norm_forward(x: &Matrix, bn: &mut BatchNorm, mode: Mode) -> Result<Matrix> {
    check("batch norm features", bn.gamma.len(), x.cols)?;
    let (mean, var) = match mode {
        Mode::Train => {
            if x.rows < 2 {
                return Err(Error::config(
                    "batch_size",
                    "batch norm needs at least 2 rows in training",
                ));
            }
            let (mean, var) = batch_moments(&x.data, x.cols);
            bn.running.update(&mean, &var);
            (mean, var)
        }
        Mode::Eval => (bn.running.mean.clone(), bn.running.var.clone()),
    };
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(x.cols) {
        for j in 0..x.cols {
            let xhat = (row[j] - mean[j]) / (var[j] + BATCH_NORM_EPS).sqrt();
            row[j] = bn.gamma[j] * xhat + bn.beta[j];
        }
    }
    Ok(out)
}

/// Below this standard deviation a vector is treated as constant.
pub const LAYER_NORM_SD_FLOOR: f64 = 1e-8;

/// Normalised vector and `1/sd` (zero when the vector is constant).
pub(crate) fn layer_norm_core(h: &[f64]) -> (Vec<f64>, f64) {
    let n = h.len() as f64;
    let mean = h.iter().sum::<f64>() / n;
    let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < LAYER_NORM_SD_FLOOR {
        return (vec![0.0; h.len()], 0.0);
    }
    let inv = 1.0 / sd;
    (h.iter().map(|v| (v - mean) * inv).collect(), inv)
}

/// Normalises across the feature dimension (population sd), then scales and
/// shifts.
pub fn layer_norm_forward(h: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let (xhat, _) = layer_norm_core(h);
    xhat.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(x, (g, b))| g * x + b)
        .collect()
}

/// Inverted-dropout scale factors: 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub(crate) fn dropout_mask(n: usize, rate: f64, rng: &mut LabRng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect()
}

pub fn dropout_forward(x: &[f64], rate: f64, mode: Mode, rng: &mut LabRng) -> Vec<f64> {
    if mode == Mode::Eval || rate == 0.0 {
        return x.to_vec();
    }
    dropout_mask(x.len(), rate, rng)
        .into_iter()
        .zip(x)
        .map(|(m, v)| m * v)
        .collect()
}

pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::Shape(format!(
            "mse over {} predictions and {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64)
}
