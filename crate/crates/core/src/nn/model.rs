//! Network assembly, forward pass and reverse-mode gradients.
//!
//! All trainable parameters live in one flat vector; each layer knows the
//! [`Slot`]s it owns. Batch-norm running statistics are kept separately as
//! they are not trained.
//!
//! Data flow for one observation:
//!
//! ```text
//! sequence -> recurrent layer 1 -> [layer norm] -> ... -> last step of final layer -+
//! static continuous inputs -------------------------------------------------------+-> dense stack -> y
//! category embeddings ------------------------------------------------------------+
//! ```
//!
//! Hidden dense layers apply `W z + b`, batch norm, ReLU, then dropout; the
//! last dense layer is linear with one output. Sequences are run at their true
//! lengths, so nothing is padded.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ops::{
    batch_moments, dropout_mask, layer_norm_core, lstm_step, matvec_add, matvec_t_add, outer_add,
    rnn_step, Activation, LstmStep, Mode, RunningStats, BATCH_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::features::{EncodedObservation, Variant};
use crate::rng::{self, LabRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrentCell {
    Lstm,
    VanillaRnn,
}

impl RecurrentCell {
    fn gates(self) -> usize {
        match self {
            RecurrentCell::Lstm => 4,
            RecurrentCell::VanillaRnn => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub statics: usize,
    pub sequence_channels: usize,
    /// Rows of each embedding table (including the reserved row).
    pub category_levels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub recurrent_cell: RecurrentCell,
    pub recurrent_layers: usize,
    pub recurrent_units: usize,
    /// Dense layers including the linear output layer.
    pub dense_layers: usize,
    pub dense_units: usize,
    pub embedding_dim: usize,
    pub dropout_rate: f64,
    pub batch_norm: bool,
    pub layer_norm: bool,
    pub inputs: InputShape,
}

pub const DEFAULT_EMBEDDING_DIM: usize = 2;
/// Dense layers after the recurrent stack in the LSTM variants.
pub const LSTM_DENSE_LAYERS: usize = 2;
const RECURRENT_CHUNK: usize = 32;

impl ModelSpec {
    /// Architecture for a grid point: `layers` counts dense layers for the
    /// feed-forward variants and LSTM layers for the recurrent ones (which then
    /// feed two dense layers).
    pub fn for_variant(variant: Variant, inputs: InputShape, layers: usize, units: usize) -> Self {
        let recurrent = variant.is_recurrent();
        ModelSpec {
            variant,
            recurrent_cell: RecurrentCell::Lstm,
            recurrent_layers: if recurrent { layers } else { 0 },
            recurrent_units: if recurrent { units } else { 0 },
            dense_layers: if recurrent { LSTM_DENSE_LAYERS } else { layers },
            dense_units: units,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            dropout_rate: 0.0,
            batch_norm: true,
            layer_norm: recurrent,
            inputs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dense_layers < 1 {
            return Err(Error::config(
                "dense_layers",
                "need at least the output layer",
            ));
        }
        if self.dense_layers > 1 && self.dense_units < 1 {
            return Err(Error::config("dense_units", "must be positive"));
        }
        if self.variant.is_recurrent() {
            if self.recurrent_layers < 1 || self.recurrent_units < 1 {
                return Err(Error::config(
                    "recurrent_layers",
                    "recurrent variants need an LSTM/RNN layer",
                ));
            }
            if self.inputs.sequence_channels < 1 {
                return Err(Error::config(
                    "inputs.sequence_channels",
                    "must be positive",
                ));
            }
        } else if self.recurrent_layers != 0 {
            return Err(Error::config(
                "recurrent_layers",
                "feed-forward variants take no recurrent layers",
            ));
        }
        if self.layer_norm && self.recurrent_layers > 0 && self.recurrent_units < 2 {
            return Err(Error::config(
                "recurrent_units",
                "layer norm needs at least 2 units",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        if self.inputs.category_levels.iter().any(|l| *l < 1) {
            return Err(Error::config(
                "inputs.category_levels",
                "tables need at least one row",
            ));
        }
        Ok(())
    }

    fn dense_input_width(&self) -> usize {
        self.recurrent_units * usize::from(self.recurrent_layers > 0)
            + self.inputs.statics
            + self.embedding_dim * self.inputs.category_levels.len()
    }
}

/// A parameter block in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.range()]
    }

    pub fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.range()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentSlots {
    pub inputs: usize,
    pub units: usize,
    pub wx: Slot,
    pub wh: Slot,
    pub b: Slot,
    /// Layer-norm scale and shift.
    pub norm: Option<(Slot, Slot)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSlots {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Slot,
    pub b: Slot,
    /// Batch-norm scale and shift.
    pub norm: Option<(Slot, Slot)>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub embeddings: Vec<Slot>,
    pub recurrent: Vec<RecurrentSlots>,
    pub dense: Vec<DenseSlots>,
    pub n_params: usize,
}

struct Allocator(usize);

impl Allocator {
    fn take(&mut self, rows: usize, cols: usize) -> Slot {
        let slot = Slot {
            offset: self.0,
            rows,
            cols,
        };
        self.0 += rows * cols;
        slot
    }
}

impl Layout {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut a = Allocator(0);
        let embeddings = spec
            .inputs
            .category_levels
            .iter()
            .map(|rows| a.take(*rows, spec.embedding_dim))
            .collect();
        let gates = spec.recurrent_cell.gates();
        let mut recurrent = Vec::new();
        let mut width = spec.inputs.sequence_channels;
        for _ in 0..spec.recurrent_layers {
            let h = spec.recurrent_units;
            let wx = a.take(gates * h, width);
            let wh = a.take(gates * h, h);
            let b = a.take(gates * h, 1);
            let norm = spec.layer_norm.then(|| (a.take(h, 1), a.take(h, 1)));
            recurrent.push(RecurrentSlots {
                inputs: width,
                units: h,
                wx,
                wh,
                b,
                norm,
            });
            width = h;
        }
        let mut dense = Vec::new();
        let mut width = spec.dense_input_width();
        for l in 0..spec.dense_layers {
            let last = l + 1 == spec.dense_layers;
            let outputs = if last { 1 } else { spec.dense_units };
            let w = a.take(outputs, width);
            let b = a.take(outputs, 1);
            let norm = (spec.batch_norm && !last).then(|| (a.take(outputs, 1), a.take(outputs, 1)));
            dense.push(DenseSlots {
                inputs: width,
                outputs,
                w,
                b,
                norm,
                activation: if last {
                    Activation::Linear
                } else {
                    Activation::Relu
                },
            });
            width = outputs;
        }
        Layout {
            embeddings,
            recurrent,
            dense,
            n_params: a.0,
        }
    }
}

/// Population moments of one batch-norm layer's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub layout: Layout,
    pub params: Vec<f64>,
    /// Running statistics per dense layer (`None` where there is no batch norm).
    pub running: Vec<Option<RunningStats>>,
}

#[derive(Default)]
struct RecurrentTrace {
    inputs: Vec<Vec<f64>>,
    lstm: Vec<LstmStep>,
    /// Vanilla RNN hidden states.
    rnn: Vec<Vec<f64>>,
    /// Layer-norm `xhat` and `1/sd` per step.
    norm: Vec<(Vec<f64>, f64)>,
    outputs: Vec<Vec<f64>>,
}

struct DenseTrace {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    normed: Vec<f64>,
    mask: Option<Vec<f64>>,
}

/// Everything the backward pass needs from one forward pass over a batch.
pub struct Tape {
    pub batch: usize,
    pub outputs: Vec<f64>,
    pub moments: Vec<Option<BatchMoments>>,
    recurrent: Vec<Vec<RecurrentTrace>>,
    dense: Vec<DenseTrace>,
}

pub struct Gradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub moments: Vec<Option<BatchMoments>>,
}

impl Model {
    /// Fan-in scaled uniform weights, zero biases except forget gates (1),
    /// unit norm scales and small uniform embeddings.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let mut params = vec![0.0; layout.n_params];
        let mut r = rng::stream(seed, 0);
        let fill = |slot: &Slot, bound: f64, p: &mut [f64], r: &mut LabRng| {
            for v in slot.of_mut(p) {
                *v = r.random_range(-bound..=bound);
            }
        };
        for e in &layout.embeddings {
            fill(e, 0.05, &mut params, &mut r);
        }
        for l in &layout.recurrent {
            fill(&l.wx, 1.0 / (l.inputs as f64).sqrt(), &mut params, &mut r);
            fill(&l.wh, 1.0 / (l.units as f64).sqrt(), &mut params, &mut r);
            if spec.recurrent_cell == RecurrentCell::Lstm {
                l.b.of_mut(&mut params)[..l.units].fill(1.0);
            }
            if let Some((g, _)) = &l.norm {
                g.of_mut(&mut params).fill(1.0);
            }
        }
        for d in &layout.dense {
            fill(
                &d.w,
                1.0 / (d.inputs.max(1) as f64).sqrt(),
                &mut params,
                &mut r,
            );
            if let Some((g, _)) = &d.norm {
                g.of_mut(&mut params).fill(1.0);
            }
        }
        let running = layout
            .dense
            .iter()
            .map(|d| d.norm.map(|_| RunningStats::new(d.outputs)))
            .collect();
        Ok(Model {
            spec,
            layout,
            params,
            running,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_sample(&self, s: &EncodedObservation) -> Result<()> {
        let inputs = &self.spec.inputs;
        if s.statics.len() != inputs.statics {
            return Err(Error::Shape(format!(
                "expected {} static inputs, got {}",
                inputs.statics,
                s.statics.len()
            )));
        }
        if s.categories.len() != inputs.category_levels.len() {
            return Err(Error::Shape("category count mismatch".into()));
        }
        if self.spec.recurrent_layers > 0 {
            if s.sequence.is_empty() {
                return Err(Error::Shape(
                    "recurrent model given an empty sequence".into(),
                ));
            }
            if s.sequence
                .iter()
                .any(|st| st.len() != inputs.sequence_channels)
            {
                return Err(Error::Shape("sequence channel mismatch".into()));
            }
        }
        Ok(())
    }

    fn run_recurrent(&self, p: &[f64], seq: &[Vec<f64>]) -> Vec<RecurrentTrace> {
        let mut traces = Vec::with_capacity(self.layout.recurrent.len());
        let mut current: Vec<Vec<f64>> = seq.to_vec();
        for layer in &self.layout.recurrent {
            let h_dim = layer.units;
            let (wx, wh, b) = (layer.wx.of(p), layer.wh.of(p), layer.b.of(p));
            let mut trace = RecurrentTrace::default();
            let mut h = vec![0.0; h_dim];
            let mut c = vec![0.0; h_dim];
            for x in &current {
                let hidden = match self.spec.recurrent_cell {
                    RecurrentCell::Lstm => {
                        let step = lstm_step(wx, wh, b, &h, &c, x);
                        c.clone_from(&step.c);
                        h.clone_from(&step.h);
                        trace.lstm.push(step);
                        h.clone()
                    }
                    RecurrentCell::VanillaRnn => {
                        let mut out = vec![0.0; h_dim];
                        rnn_step(wx, wh, b, &h, x, &mut out, Activation::Tanh);
                        h.clone_from(&out);
                        trace.rnn.push(out);
                        h.clone()
                    }
                };
                let output = if let Some((g, be)) = &layer.norm {
                    let (xhat, inv) = layer_norm_core(&hidden);
                    let out = xhat
                        .iter()
                        .zip(g.of(p).iter().zip(be.of(p)))
                        .map(|(x, (g, b))| g * x + b)
                        .collect();
                    trace.norm.push((xhat, inv));
                    out
                } else {
                    hidden
                };
                trace.outputs.push(output);
            }
            trace.inputs = std::mem::take(&mut current);
            current = trace.outputs.clone();
            traces.push(trace);
        }
        traces
    }

    /// Forward pass over a batch. Training mode uses batch statistics in the
    /// batch-norm layers and, with a generator, draws dropout masks.
    pub fn forward(
        &self,
        params: &[f64],
        batch: &[&EncodedObservation],
        mode: Mode,
        mut dropout_rng: Option<&mut LabRng>,
    ) -> Result<Tape> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        for s in batch {
            self.check_sample(s)?;
        }
        if mode == Mode::Train && n < 2 && self.layout.dense.iter().any(|d| d.norm.is_some()) {
            return Err(Error::config(
                "batch_size",
                "batch norm needs at least 2 rows in training",
            ));
        }
        let recurrent: Vec<Vec<RecurrentTrace>> = if self.layout.recurrent.is_empty() {
            Vec::new()
        } else {
            batch
                .par_iter()
                .map(|s| self.run_recurrent(params, &s.sequence))
                .collect()
        };

        let width = self.spec.dense_input_width();
        let mut z = Vec::with_capacity(n * width);
        for (i, s) in batch.iter().enumerate() {
            if let Some(traces) = recurrent.get(i) {
                z.extend_from_slice(
                    traces
                        .last()
                        .and_then(|t| t.outputs.last())
                        .expect("nonempty sequence"),
                );
            }
            z.extend_from_slice(&s.statics);
            for (slot, idx) in self.layout.embeddings.iter().zip(&s.categories) {
                let row = (*idx).min(slot.rows - 1);
                z.extend_from_slice(&slot.of(params)[row * slot.cols..(row + 1) * slot.cols]);
            }
        }

        let mut dense = Vec::with_capacity(self.layout.dense.len());
        let mut moments = Vec::with_capacity(self.layout.dense.len());
        for (l, layer) in self.layout.dense.iter().enumerate() {
            let (w, b) = (layer.w.of(params), layer.b.of(params));
            let mut pre = Vec::with_capacity(n * layer.outputs);
            for row in z.chunks_exact(layer.inputs) {
                let mut out = b.to_vec();
                matvec_add(w, layer.inputs, row, &mut out);
                pre.extend(out);
            }
            let (mut xhat, mut inv_std, mut normed) = (Vec::new(), Vec::new(), pre.clone());
            let mut layer_moments = None;
            if let Some((g, be)) = &layer.norm {
                let (mean, var) = match mode {
                    Mode::Train => batch_moments(&pre, layer.outputs),
                    Mode::Eval => {
                        let r = self.running[l]
                            .as_ref()
                            .expect("running stats for batch norm");
                        (r.mean.clone(), r.var.clone())
                    }
                };
                inv_std = var
                    .iter()
                    .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
                    .collect();
                xhat = pre
                    .chunks_exact(layer.outputs)
                    .flat_map(|row| {
                        row.iter()
                            .zip(&mean)
                            .zip(&inv_std)
                            .map(|((x, m), s)| (x - m) * s)
                    })
                    .collect();
                let (g, be) = (g.of(params), be.of(params));
                normed = xhat
                    .chunks_exact(layer.outputs)
                    .flat_map(|row| row.iter().zip(g).zip(be).map(|((x, g), b)| g * x + b))
                    .collect();
                if mode == Mode::Train {
                    layer_moments = Some(BatchMoments { mean, var });
                }
            }
            let mut output: Vec<f64> = normed.iter().map(|v| layer.activation.apply(*v)).collect();
            let last = l + 1 == self.layout.dense.len();
            let mut mask = None;
            if !last && mode == Mode::Train && self.spec.dropout_rate > 0.0 {
                if let Some(r) = dropout_rng.as_deref_mut() {
                    let m = dropout_mask(output.len(), self.spec.dropout_rate, r);
                    output.iter_mut().zip(&m).for_each(|(o, k)| *o *= k);
                    mask = Some(m);
                }
            }
            dense.push(DenseTrace {
                input: std::mem::replace(&mut z, output),
                xhat,
                inv_std,
                normed,
                mask,
            });
            moments.push(layer_moments);
        }
        Ok(Tape {
            batch: n,
            outputs: z,
            moments,
            recurrent,
            dense,
        })
    }

    /// Gradient of the mean squared error over the batch with respect to
    /// every parameter.
    pub fn backward(&self, params: &[f64], batch: &[&EncodedObservation], tape: &Tape) -> Vec<f64> {
        let n = tape.batch;
        let mut grad = vec![0.0; params.len()];
        let mut dz: Vec<f64> = tape
            .outputs
            .iter()
            .zip(batch)
            .map(|(y, s)| 2.0 * (y - s.target) / n as f64)
            .collect();

        for (layer, trace) in self.layout.dense.iter().zip(&tape.dense).rev() {
            let k = layer.outputs;
            if let Some(mask) = &trace.mask {
                dz.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
            }
            let mut da: Vec<f64> = dz
                .iter()
                .zip(&trace.normed)
                .map(|(d, x)| d * layer.activation.derivative(*x, layer.activation.apply(*x)))
                .collect();
            if let Some((g_slot, b_slot)) = &layer.norm {
                let gamma = g_slot.of(params).to_vec();
                let mut dgamma = vec![0.0; k];
                let mut dbeta = vec![0.0; k];
                for (drow, xrow) in da.chunks_exact(k).zip(trace.xhat.chunks_exact(k)) {
                    for j in 0..k {
                        dgamma[j] += drow[j] * xrow[j];
                        dbeta[j] += drow[j];
                    }
                }
                g_slot
                    .of_mut(&mut grad)
                    .iter_mut()
                    .zip(&dgamma)
                    .for_each(|(g, d)| *g += d);
                b_slot
                    .of_mut(&mut grad)
                    .iter_mut()
                    .zip(&dbeta)
                    .for_each(|(g, d)| *g += d);
                let nf = n as f64;
                for (drow, xrow) in da.chunks_exact_mut(k).zip(trace.xhat.chunks_exact(k)) {
                    for j in 0..k {
                        drow[j] = gamma[j] * trace.inv_std[j] / nf
                            * (nf * drow[j] - dbeta[j] - xrow[j] * dgamma[j]);
                    }
                }
            }
            let w = layer.w.of(params);
            let mut dinput = vec![0.0; n * layer.inputs];
            {
                let dw = layer.w.of_mut(&mut grad);
                for ((drow, xrow), dxrow) in da
                    .chunks_exact(k)
                    .zip(trace.input.chunks_exact(layer.inputs))
                    .zip(dinput.chunks_exact_mut(layer.inputs))
                {
                    outer_add(dw, layer.inputs, drow, xrow);
                    matvec_t_add(w, layer.inputs, drow, dxrow);
                }
            }
            let db = layer.b.of_mut(&mut grad);
            for drow in da.chunks_exact(k) {
                db.iter_mut().zip(drow).for_each(|(g, d)| *g += d);
            }
            dz = dinput;
        }

        let width = self.spec.dense_input_width();
        let rec_width = if self.layout.recurrent.is_empty() {
            0
        } else {
            self.spec.recurrent_units
        };
        for (i, s) in batch.iter().enumerate() {
            let row = &dz[i * width..(i + 1) * width];
            let mut offset = rec_width + self.spec.inputs.statics;
            for (slot, idx) in self.layout.embeddings.iter().zip(&s.categories) {
                let r = (*idx).min(slot.rows - 1);
                let g = &mut slot.of_mut(&mut grad)[r * slot.cols..(r + 1) * slot.cols];
                g.iter_mut()
                    .zip(&row[offset..offset + slot.cols])
                    .for_each(|(a, b)| *a += b);
                offset += slot.cols;
            }
        }
        if rec_width > 0 {
            // fixed chunks summed in order keep the result independent of thread count
            let indices: Vec<usize> = (0..n).collect();
            let partials: Vec<Vec<f64>> = indices
                .par_chunks(RECURRENT_CHUNK)
                .map(|chunk| {
                    let mut g = vec![0.0; params.len()];
                    for &i in chunk {
                        let row = &dz[i * width..i * width + rec_width];
                        self.backward_recurrent(params, &tape.recurrent[i], row, &mut g);
                    }
                    g
                })
                .collect();
            for part in partials {
                grad.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
            }
        }
        grad
    }

    fn backward_recurrent(
        &self,
        p: &[f64],
        traces: &[RecurrentTrace],
        d_last: &[f64],
        grad: &mut [f64],
    ) {
        let steps = traces[0].inputs.len();
        // gradient with respect to each step's output of the current layer
        let mut d_out = vec![vec![0.0; d_last.len()]; steps];
        d_out[steps - 1].copy_from_slice(d_last);
        for (layer, trace) in self.layout.recurrent.iter().zip(traces).rev() {
            let h_dim = layer.units;
            if let Some((g_slot, b_slot)) = &layer.norm {
                let gamma = g_slot.of(p).to_vec();
                for (t, d) in d_out.iter_mut().enumerate() {
                    let (xhat, inv) = &trace.norm[t];
                    let dg = g_slot.of_mut(grad);
                    dg.iter_mut()
                        .zip(d.iter().zip(xhat))
                        .for_each(|(g, (a, x))| *g += a * x);
                    let db = b_slot.of_mut(grad);
                    db.iter_mut().zip(d.iter()).for_each(|(g, a)| *g += a);
                    let dxhat: Vec<f64> = d.iter().zip(&gamma).map(|(a, g)| a * g).collect();
                    let nf = h_dim as f64;
                    let mean_d = dxhat.iter().sum::<f64>() / nf;
                    let mean_dx = dxhat.iter().zip(xhat).map(|(a, x)| a * x).sum::<f64>() / nf;
                    for j in 0..h_dim {
                        d[j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
            }
            let (wx, wh) = (layer.wx.of(p), layer.wh.of(p));
            let gates = self.spec.recurrent_cell.gates() * h_dim;
            let mut dwx = vec![0.0; layer.wx.len()];
            let mut dwh = vec![0.0; layer.wh.len()];
            let mut db = vec![0.0; gates];
            let mut d_in = vec![vec![0.0; layer.inputs]; steps];
            let mut dh_next = vec![0.0; h_dim];
            let mut dc_next = vec![0.0; h_dim];
            let zeros = vec![0.0; h_dim];
            for t in (0..steps).rev() {
                let dh: Vec<f64> = d_out[t].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
                let mut da = vec![0.0; gates];
                let h_prev: &[f64];
                match self.spec.recurrent_cell {
                    RecurrentCell::Lstm => {
                        let step = &trace.lstm[t];
                        let c_prev = if t > 0 {
                            &trace.lstm[t - 1].c[..]
                        } else {
                            &zeros[..]
                        };
                        h_prev = if t > 0 { &trace.lstm[t - 1].h } else { &zeros };
                        for j in 0..h_dim {
                            let (f, i, g, o) = (
                                step.gates[j],
                                step.gates[h_dim + j],
                                step.gates[2 * h_dim + j],
                                step.gates[3 * h_dim + j],
                            );
                            let tc = step.tanh_c[j];
                            let dc = dc_next[j] + dh[j] * o * (1.0 - tc * tc);
                            da[j] = dc * c_prev[j] * f * (1.0 - f);
                            da[h_dim + j] = dc * g * i * (1.0 - i);
                            da[2 * h_dim + j] = dc * i * (1.0 - g * g);
                            da[3 * h_dim + j] = dh[j] * tc * o * (1.0 - o);
                            dc_next[j] = dc * f;
                        }
                    }
                    RecurrentCell::VanillaRnn => {
                        let h = &trace.rnn[t];
                        h_prev = if t > 0 { &trace.rnn[t - 1] } else { &zeros };
                        for j in 0..h_dim {
                            da[j] = dh[j] * (1.0 - h[j] * h[j]);
                        }
                    }
                }
                outer_add(&mut dwx, layer.inputs, &da, &trace.inputs[t]);
                outer_add(&mut dwh, h_dim, &da, h_prev);
                db.iter_mut().zip(&da).for_each(|(g, d)| *g += d);
                matvec_t_add(wx, layer.inputs, &da, &mut d_in[t]);
                dh_next.fill(0.0);
                matvec_t_add(wh, h_dim, &da, &mut dh_next);
            }
            layer
                .wx
                .of_mut(grad)
                .iter_mut()
                .zip(&dwx)
                .for_each(|(g, d)| *g += d);
            layer
                .wh
                .of_mut(grad)
                .iter_mut()
                .zip(&dwh)
                .for_each(|(g, d)| *g += d);
            layer
                .b
                .of_mut(grad)
                .iter_mut()
                .zip(&db)
                .for_each(|(g, d)| *g += d);
            d_out = d_in;
        }
    }

    /// Training-mode loss and gradient for one batch. Running statistics are
    /// not touched; apply the returned moments with [`Model::update_running`].
    pub fn loss_and_gradient(
        &self,
        batch: &[&EncodedObservation],
        dropout_rng: Option<&mut LabRng>,
    ) -> Result<Gradient> {
        let tape = self.forward(&self.params, batch, Mode::Train, dropout_rng)?;
        let loss = batch_mse(&tape.outputs, batch);
        let grad = self.backward(&self.params, batch, &tape);
        Ok(Gradient {
            loss,
            grad,
            moments: tape.moments,
        })
    }

    /// Loss under `params` without side effects (used for finite differences
    /// and validation).
    pub fn loss_with(
        &self,
        params: &[f64],
        batch: &[&EncodedObservation],
        mode: Mode,
    ) -> Result<f64> {
        let tape = self.forward(params, batch, mode, None)?;
        Ok(batch_mse(&tape.outputs, batch))
    }

    pub fn update_running(&mut self, moments: &[Option<BatchMoments>]) {
        for (r, m) in self.running.iter_mut().zip(moments) {
            if let (Some(r), Some(m)) = (r.as_mut(), m) {
                r.update(&m.mean, &m.var);
            }
        }
    }

    /// Evaluation-mode outputs (normalised log scale), one per sample.
    pub fn predict(&self, samples: &[EncodedObservation]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(2048) {
            let refs: Vec<&EncodedObservation> = chunk.iter().collect();
            out.extend(self.forward(&self.params, &refs, Mode::Eval, None)?.outputs);
        }
        Ok(out)
    }

    /// Final-layer hidden state at the last step, for inspection.
    pub fn last_hidden(&self, sequence: &[Vec<f64>]) -> Vec<f64> {
        let traces = self.run_recurrent(&self.params, sequence);
        traces
            .last()
            .and_then(|t| t.outputs.last().cloned())
            .unwrap_or_default()
    }
}

fn batch_mse(outputs: &[f64], batch: &[&EncodedObservation]) -> f64 {
    outputs
        .iter()
        .zip(batch)
        .map(|(y, s)| (y - s.target).powi(2))
        .sum::<f64>()
        / batch.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{
        analytic_gradient, max_relative_error, numerical_gradient, DEFAULT_STEP,
    };
    use crate::nn::ops::{lstm_cell_forward, LstmGateParams};
    use rand_distr::{Distribution, StandardNormal};

    fn inputs(statics: usize, channels: usize, levels: Vec<usize>) -> InputShape {
        InputShape {
            statics,
            sequence_channels: channels,
            category_levels: levels,
        }
    }

    fn samples(spec: &ModelSpec, n: usize, max_len: usize, seed: u64) -> Vec<EncodedObservation> {
        let mut r = rng::stream(seed, 9);
        let normal = |r: &mut LabRng| -> f64 { StandardNormal.sample(r) };
        (0..n)
            .map(|_| {
                let len = if spec.recurrent_layers > 0 {
                    r.random_range(1..=max_len)
                } else {
                    0
                };
                EncodedObservation {
                    statics: (0..spec.inputs.statics).map(|_| normal(&mut r)).collect(),
                    categories: spec
                        .inputs
                        .category_levels
                        .iter()
                        .map(|l| r.random_range(0..*l))
                        .collect(),
                    sequence: (0..len)
                        .map(|_| {
                            (0..spec.inputs.sequence_channels)
                                .map(|_| normal(&mut r))
                                .collect()
                        })
                        .collect(),
                    target: normal(&mut r),
                }
            })
            .collect()
    }

    fn assert_gradients(spec: ModelSpec, batch_size: usize, instances: u64) {
        for seed in 0..instances {
            let model = Model::new(spec.clone(), seed).unwrap();
            let data = samples(&spec, batch_size, 4, seed + 100);
            let batch: Vec<&EncodedObservation> = data.iter().collect();
            let a = analytic_gradient(&model, &batch).unwrap();
            let n = numerical_gradient(&model, &batch, DEFAULT_STEP).unwrap();
            let err = max_relative_error(&a, &n, 0..a.len());
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    fn fnn(batch_norm: bool) -> ModelSpec {
        ModelSpec {
            batch_norm,
            ..ModelSpec::for_variant(Variant::Fnn, inputs(2, 0, vec![]), 2, 3)
        }
    }

    #[test]
    fn layout_counts() {
        let spec = fnn(false);
        let layout = Layout::new(&spec);
        assert_eq!(layout.n_params, 2 * 3 + 3 + 3 + 1);
        let spec = ModelSpec::for_variant(Variant::LstmPlus, inputs(3, 4, vec![7, 9]), 2, 8);
        let layout = Layout::new(&spec);
        let lstm1 = 32 * 4 + 32 * 8 + 32 + 16;
        let lstm2 = 32 * 8 + 32 * 8 + 32 + 16;
        let dense_in = 8 + 3 + 4;
        let dense = dense_in * 8 + 8 + 16 + 8 + 1;
        assert_eq!(layout.n_params, 7 * 2 + 9 * 2 + lstm1 + lstm2 + dense);
    }

    #[test]
    fn tiny_fnn_gradients() {
        assert_gradients(fnn(false), 4, 5);
        assert_gradients(fnn(true), 4, 5);
    }

    #[test]
    fn fnn_plus_with_embeddings_gradients() {
        let spec = ModelSpec::for_variant(Variant::FnnPlus, inputs(3, 0, vec![3, 4]), 3, 4);
        assert_gradients(spec, 6, 5);
    }

    #[test]
    fn tiny_lstm_plus_gradients() {
        let spec = ModelSpec::for_variant(Variant::LstmPlus, inputs(2, 4, vec![3]), 1, 3);
        assert_gradients(spec, 4, 5);
        let deep = ModelSpec::for_variant(Variant::Lstm, inputs(2, 3, vec![3]), 2, 3);
        assert_gradients(deep, 3, 3);
    }

    #[test]
    fn vanilla_rnn_gradients() {
        let spec = ModelSpec {
            recurrent_cell: RecurrentCell::VanillaRnn,
            layer_norm: false,
            ..ModelSpec::for_variant(Variant::Lstm, inputs(1, 2, vec![]), 1, 3)
        };
        assert_gradients(spec, 3, 5);
    }

    #[test]
    fn zero_error_batch_has_zero_output_bias_gradient() {
        let spec = fnn(true);
        let model = Model::new(spec.clone(), 1).unwrap();
        let mut data = samples(&spec, 4, 1, 2);
        let refs: Vec<&EncodedObservation> = data.iter().collect();
        let out = model
            .forward(&model.params, &refs, Mode::Train, None)
            .unwrap()
            .outputs;
        for (d, y) in data.iter_mut().zip(out) {
            d.target = y;
        }
        let refs: Vec<&EncodedObservation> = data.iter().collect();
        let g = model.loss_and_gradient(&refs, None).unwrap();
        assert_eq!(g.loss, 0.0);
        let bias = model.layout.dense.last().unwrap().b;
        assert!(bias.of(&g.grad).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn recurrence_matches_chained_cells() {
        let spec = ModelSpec {
            layer_norm: false,
            ..ModelSpec::for_variant(Variant::Lstm, inputs(1, 3, vec![]), 1, 4)
        };
        let model = Model::new(spec.clone(), 5).unwrap();
        let seq = samples(&spec, 1, 4, 8).remove(0).sequence;
        let l = &model.layout.recurrent[0];
        let params = LstmGateParams::from_stacked(
            4,
            3,
            l.wx.of(&model.params),
            l.wh.of(&model.params),
            l.b.of(&model.params),
        );
        let (mut h, mut c) = (vec![0.0; 4], vec![0.0; 4]);
        for x in &seq {
            (h, c) = lstm_cell_forward(&h, &c, x, &params).unwrap();
        }
        assert_eq!(model.last_hidden(&seq), h);
    }

    #[test]
    fn first_step_influences_last_hidden_state() {
        let spec = ModelSpec::for_variant(Variant::Lstm, inputs(1, 3, vec![]), 2, 4);
        let model = Model::new(spec.clone(), 3).unwrap();
        let mut seq = vec![vec![0.3, -0.2, 0.5]; 6];
        let before = model.last_hidden(&seq);
        seq[0][1] += 0.5;
        assert_ne!(model.last_hidden(&seq), before);
    }

    #[test]
    fn eval_predictions_ignore_batch_composition() {
        let spec = ModelSpec::for_variant(Variant::LstmPlus, inputs(2, 3, vec![4]), 1, 4);
        let mut model = Model::new(spec.clone(), 2).unwrap();
        let data = samples(&spec, 9, 5, 4);
        let refs: Vec<&EncodedObservation> = data.iter().collect();
        let g = model.loss_and_gradient(&refs, None).unwrap();
        model.update_running(&g.moments);
        let all = model.predict(&data).unwrap();
        for (i, d) in data.iter().enumerate() {
            let single = model.predict(std::slice::from_ref(d)).unwrap()[0];
            assert!((single - all[i]).abs() < 1e-10);
        }
        let twice = model.predict(&[data[0].clone(), data[0].clone()]).unwrap();
        assert_eq!(twice[0], twice[1]);
    }

    #[test]
    fn shape_errors() {
        let spec = ModelSpec::for_variant(Variant::Lstm, inputs(1, 3, vec![]), 1, 4);
        let model = Model::new(spec, 0).unwrap();
        let bad = EncodedObservation {
            statics: vec![0.0],
            categories: vec![],
            sequence: vec![],
            target: 0.0,
        };
        assert!(matches!(model.predict(&[bad]), Err(Error::Shape(_))));
        let mut invalid = ModelSpec::for_variant(Variant::Fnn, inputs(1, 0, vec![]), 2, 4);
        invalid.dropout_rate = 1.0;
        assert!(matches!(Model::new(invalid, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn initialisation_is_seeded() {
        let spec = fnn(true);
        assert_eq!(
            Model::new(spec.clone(), 4).unwrap(),
            Model::new(spec.clone(), 4).unwrap()
        );
        assert_ne!(
            Model::new(spec.clone(), 4).unwrap().params,
            Model::new(spec, 5).unwrap().params
        );
    }
}
