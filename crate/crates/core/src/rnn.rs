//! Siamese bidirectional LSTM pair scorer.
//!
//! Both inputs run through one shared bidirectional LSTM layer. Their
//! per-step outputs are aligned to a common length by linear interpolation
//! of the shorter branch, concatenated (first input, then second) and fed to
//! a second bidirectional LSTM layer. The final forward state and the final
//! backward state of that layer go through an affine map and a sigmoid.
//!
//! The public score averages both branch orders so it is symmetric in its
//! arguments. Training minimizes binary cross-entropy of that score with
//! Adam and full backpropagation through time.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::FeatureBank;
use crate::capture::Dataset;
use crate::features::{FunctionMatrix, NUM_FUNCTIONS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RnnError {
    #[error("function matrix is not normalized")]
    NotNormalized,
    #[error("input has {got} channels, network expects {expected}")]
    InputWidth { got: usize, expected: usize },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("no genuine pairs: users lack one of the two sessions")]
    MissingSession,
    #[error("no impostor pairs can be formed")]
    ImpossiblePairing,
    #[error("no training pairs")]
    EmptyPairSet,
    #[error("loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Layer widths, in memory blocks per direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl NetworkShape {
    /// 21 inputs, 21 blocks in the shared first layer, 42 in the second.
    pub const DEFAULT: NetworkShape = NetworkShape {
        input: NUM_FUNCTIONS,
        hidden1: 21,
        hidden2: 42,
    };

    /// Width of the second layer's input: two branches times two directions.
    pub fn layer2_input(&self) -> usize {
        4 * self.hidden1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LstmSlot {
    w: usize,
    b: usize,
    input: usize,
    hidden: usize,
}

impl LstmSlot {
    fn cols(&self) -> usize {
        self.input + self.hidden
    }
    fn w_len(&self) -> usize {
        4 * self.hidden * self.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    l1f: LstmSlot,
    l1b: LstmSlot,
    l2f: LstmSlot,
    l2b: LstmSlot,
    head_w: usize,
    head_b: usize,
    total: usize,
}

impl Layout {
    fn new(shape: &NetworkShape) -> Self {
        let mut off = 0;
        let mut slot = |input: usize, hidden: usize| {
            let w = off;
            let w_len = 4 * hidden * (input + hidden);
            let b = w + w_len;
            off = b + 4 * hidden;
            LstmSlot { w, b, input, hidden }
        };
        let l1f = slot(shape.input, shape.hidden1);
        let l1b = slot(shape.input, shape.hidden1);
        let l2f = slot(shape.layer2_input(), shape.hidden2);
        let l2b = slot(shape.layer2_input(), shape.hidden2);
        let head_w = off;
        let head_b = head_w + 2 * shape.hidden2;
        Layout {
            l1f,
            l1b,
            l2f,
            l2b,
            head_w,
            head_b,
            total: head_b + 1,
        }
    }
}

/// All network weights in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    shape: NetworkShape,
    layout: Layout,
    data: Vec<f64>,
    pub seed: u64,
}

impl NetworkParams {
    pub fn init(seed: u64) -> Self {
        Self::init_with_shape(NetworkShape::DEFAULT, seed)
    }

    /// Weights uniform in ±1/√fan_in, forget-gate biases 1, other biases 0.
    pub fn init_with_shape(shape: NetworkShape, seed: u64) -> Self {
        let mut p = Self::zeros(shape);
        p.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in [p.layout.l1f, p.layout.l1b, p.layout.l2f, p.layout.l2b] {
            let bound = 1.0 / (slot.cols() as f64).sqrt();
            for w in &mut p.data[slot.w..slot.w + slot.w_len()] {
                *w = rng.gen_range(-bound..=bound);
            }
            for b in &mut p.data[slot.b + slot.hidden..slot.b + 2 * slot.hidden] {
                *b = 1.0;
            }
        }
        let head_len = 2 * shape.hidden2;
        let bound = 1.0 / (head_len as f64).sqrt();
        let hw = p.layout.head_w;
        for w in &mut p.data[hw..hw + head_len] {
            *w = rng.gen_range(-bound..=bound);
        }
        p
    }

    pub fn zeros(shape: NetworkShape) -> Self {
        let layout = Layout::new(&shape);
        Self {
            shape,
            layout,
            data: vec![0.0; layout.total],
            seed: 0,
        }
    }

    pub fn shape(&self) -> NetworkShape {
        self.shape
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn head_bias(&self) -> f64 {
        self.data[self.layout.head_b]
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        for (name, slot) in [
            ("layer1.forward", self.layout.l1f),
            ("layer1.backward", self.layout.l1b),
            ("layer2.forward", self.layout.l2f),
            ("layer2.backward", self.layout.l2b),
        ] {
            out.push((
                format!("{name}.weight"),
                vec![4 * slot.hidden, slot.cols()],
                slot.w..slot.w + slot.w_len(),
            ));
            out.push((
                format!("{name}.bias"),
                vec![4 * slot.hidden],
                slot.b..slot.b + 4 * slot.hidden,
            ));
        }
        let hw = self.layout.head_w;
        out.push(("head.weight".into(), vec![2 * self.shape.hidden2], hw..hw + 2 * self.shape.hidden2));
        out.push(("head.bias".into(), vec![1], self.layout.head_b..self.layout.head_b + 1));
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            shape: self.shape,
            seed: self.seed,
            tensors: self
                .tensors()
                .into_iter()
                .map(|(name, shape, range)| TensorDump {
                    name,
                    shape,
                    data: self.data[range].to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, RnnError> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(RnnError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut p = Self::zeros(ck.shape);
        p.seed = ck.seed;
        let expected = p.tensors();
        if expected.len() != ck.tensors.len() {
            return Err(RnnError::Checkpoint("tensor count mismatch".into()));
        }
        for ((name, shape, range), t) in expected.into_iter().zip(&ck.tensors) {
            if t.name != name || t.shape != shape || t.data.len() != range.len() {
                return Err(RnnError::Checkpoint(format!("tensor {} does not match {name}", t.name)));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(RnnError::Checkpoint(format!("tensor {name} holds non-finite values")));
            }
            p.data[range].copy_from_slice(&t.data);
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), RnnError> {
        let json = serde_json::to_string(&self.to_checkpoint())
            .map_err(|e| RnnError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| RnnError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RnnError> {
        let text = std::fs::read_to_string(path).map_err(|e| RnnError::Checkpoint(e.to_string()))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| RnnError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }
}

pub const CHECKPOINT_FORMAT: &str = "biotouch-blstm";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON tensor dump with a shape manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub shape: NetworkShape,
    pub seed: u64,
    pub tensors: Vec<TensorDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDump {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A sequence of input frames.
pub type Sequence = Vec<Vec<f64>>;

pub fn matrix_to_sequence(m: &FunctionMatrix) -> Sequence {
    m.frames().iter().map(|f| f.to_vec()).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cached activations of one LSTM pass, in processing order.
struct LstmTape {
    z: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
}

fn lstm_forward<'a>(p: &[f64], slot: LstmSlot, xs: impl Iterator<Item = &'a [f64]>) -> LstmTape {
    let hd = slot.hidden;
    let cols = slot.cols();
    let w = &p[slot.w..slot.w + slot.w_len()];
    let b = &p[slot.b..slot.b + 4 * hd];
    let mut tape = LstmTape {
        z: Vec::new(),
        gates: Vec::new(),
        c: Vec::new(),
        h: Vec::new(),
    };
    let mut h_prev = vec![0.0; hd];
    let mut c_prev = vec![0.0; hd];
    for x in xs {
        let mut z = Vec::with_capacity(cols);
        z.extend_from_slice(x);
        z.extend_from_slice(&h_prev);
        let mut gates: Vec<f64> = (0..4 * hd)
            .map(|r| {
                let row = &w[r * cols..(r + 1) * cols];
                b[r] + row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        for (r, g) in gates.iter_mut().enumerate() {
            *g = if (2 * hd..3 * hd).contains(&r) { g.tanh() } else { sigmoid(*g) };
        }
        let c: Vec<f64> = (0..hd)
            .map(|k| gates[hd + k] * c_prev[k] + gates[k] * gates[2 * hd + k])
            .collect();
        let h: Vec<f64> = (0..hd).map(|k| gates[3 * hd + k] * c[k].tanh()).collect();
        h_prev.clone_from(&h);
        c_prev.clone_from(&c);
        tape.z.push(z);
        tape.gates.push(gates);
        tape.c.push(c);
        tape.h.push(h);
    }
    tape
}

/// Backpropagates `dh` (processing order) through one LSTM pass. Adds the
/// parameter gradient into `grad` and returns input gradients in processing
/// order.
fn lstm_backward(p: &[f64], slot: LstmSlot, tape: &LstmTape, dh: &[Vec<f64>], grad: &mut [f64]) -> Vec<Vec<f64>> {
    let hd = slot.hidden;
    let cols = slot.cols();
    let steps = tape.h.len();
    let w = &p[slot.w..slot.w + slot.w_len()];
    let mut dx = vec![Vec::new(); steps];
    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    let mut da = vec![0.0; 4 * hd];
    for s in (0..steps).rev() {
        let g = &tape.gates[s];
        let c = &tape.c[s];
        for k in 0..hd {
            let dh_k = dh[s][k] + dh_next[k];
            let (i, f, gg, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
            let tc = c[k].tanh();
            let dc = dh_k * o * (1.0 - tc * tc) + dc_next[k];
            let c_prev = if s > 0 { tape.c[s - 1][k] } else { 0.0 };
            da[k] = dc * gg * i * (1.0 - i);
            da[hd + k] = dc * c_prev * f * (1.0 - f);
            da[2 * hd + k] = dc * i * (1.0 - gg * gg);
            da[3 * hd + k] = dh_k * tc * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        let z = &tape.z[s];
        let gw = &mut grad[slot.w..slot.w + slot.w_len()];
        for r in 0..4 * hd {
            let d = da[r];
            if d != 0.0 {
                for (gv, zv) in gw[r * cols..(r + 1) * cols].iter_mut().zip(z) {
                    *gv += d * zv;
                }
            }
        }
        let gb = &mut grad[slot.b..slot.b + 4 * hd];
        for (gv, d) in gb.iter_mut().zip(&da) {
            *gv += d;
        }
        let mut dz = vec![0.0; cols];
        for r in 0..4 * hd {
            let d = da[r];
            if d != 0.0 {
                for (dzv, wv) in dz.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                    *dzv += d * wv;
                }
            }
        }
        dh_next.copy_from_slice(&dz[slot.input..]);
        dz.truncate(slot.input);
        dx[s] = dz;
    }
    dx
}

struct BiTape {
    fwd: LstmTape,
    bwd: LstmTape,
}

impl BiTape {
    fn len(&self) -> usize {
        self.fwd.h.len()
    }

    /// Output at original step `t`: forward state then backward state.
    fn output(&self, t: usize) -> Vec<f64> {
        let n = self.len();
        let mut out = self.fwd.h[t].clone();
        out.extend_from_slice(&self.bwd.h[n - 1 - t]);
        out
    }
}

fn bi_forward(p: &[f64], fwd: LstmSlot, bwd: LstmSlot, xs: &[Vec<f64>]) -> BiTape {
    BiTape {
        fwd: lstm_forward(p, fwd, xs.iter().map(|v| v.as_slice())),
        bwd: lstm_forward(p, bwd, xs.iter().rev().map(|v| v.as_slice())),
    }
}

/// `d_out[t]` is the gradient of the output at original step `t`.
fn bi_backward(
    p: &[f64],
    fwd: LstmSlot,
    bwd: LstmSlot,
    tape: &BiTape,
    d_out: &[Vec<f64>],
    grad: &mut [f64],
) -> Vec<Vec<f64>> {
    let n = tape.len();
    let hd = fwd.hidden;
    let dh_f: Vec<Vec<f64>> = d_out.iter().map(|d| d[..hd].to_vec()).collect();
    let dh_b: Vec<Vec<f64>> = (0..n).map(|s| d_out[n - 1 - s][hd..].to_vec()).collect();
    let dx_f = lstm_backward(p, fwd, &tape.fwd, &dh_f, grad);
    let dx_b = lstm_backward(p, bwd, &tape.bwd, &dh_b, grad);
    (0..n)
        .map(|t| dx_f[t].iter().zip(&dx_b[n - 1 - t]).map(|(a, b)| a + b).collect())
        .collect()
}

/// Interpolation weights mapping `len` target steps onto `src` source steps.
fn alignment(src: usize, len: usize) -> Vec<(usize, f64)> {
    (0..len)
        .map(|i| {
            if src == len {
                (i, 0.0)
            } else if src == 1 || len == 1 {
                (0, 0.0)
            } else {
                let pos = i as f64 * (src - 1) as f64 / (len - 1) as f64;
                let lo = (pos.floor() as usize).min(src - 2);
                (lo, pos - lo as f64)
            }
        })
        .collect()
}

fn interpolate(outputs: &[Vec<f64>], map: &[(usize, f64)]) -> Vec<Vec<f64>> {
    map.iter()
        .map(|&(lo, frac)| {
            if frac == 0.0 {
                outputs[lo].clone()
            } else {
                outputs[lo]
                    .iter()
                    .zip(&outputs[lo + 1])
                    .map(|(a, b)| (1.0 - frac) * a + frac * b)
                    .collect()
            }
        })
        .collect()
}

/// Forward pass of one branch order, kept for backpropagation.
struct OrderedTape {
    layer2: BiTape,
    summary: Vec<f64>,
    logit: f64,
}

/// Layer-1 outputs of one branch.
struct BranchTape {
    tape: BiTape,
    outputs: Vec<Vec<f64>>,
}

fn branch_forward(params: &NetworkParams, xs: &[Vec<f64>]) -> BranchTape {
    let l = &params.layout;
    let tape = bi_forward(&params.data, l.l1f, l.l1b, xs);
    let outputs = (0..tape.len()).map(|t| tape.output(t)).collect();
    BranchTape { tape, outputs }
}

fn ordered_forward(params: &NetworkParams, first: &BranchTape, second: &BranchTape) -> OrderedTape {
    let l = &params.layout;
    let len = first.outputs.len().max(second.outputs.len());
    let a = interpolate(&first.outputs, &alignment(first.outputs.len(), len));
    let b = interpolate(&second.outputs, &alignment(second.outputs.len(), len));
    let inputs: Vec<Vec<f64>> = a
        .into_iter()
        .zip(b)
        .map(|(mut x, y)| {
            x.extend(y);
            x
        })
        .collect();
    let layer2 = bi_forward(&params.data, l.l2f, l.l2b, &inputs);
    let n = layer2.len();
    let mut summary = layer2.fwd.h[n - 1].clone();
    summary.extend_from_slice(&layer2.bwd.h[n - 1]);
    let hw = &params.data[l.head_w..l.head_w + summary.len()];
    let logit = params.data[l.head_b] + hw.iter().zip(&summary).map(|(w, s)| w * s).sum::<f64>();
    OrderedTape {
        layer2,
        summary,
        logit,
    }
}

/// Backpropagates `d_logit` through one branch order, accumulating the
/// gradient of each branch's layer-1 outputs.
#[allow(clippy::too_many_arguments)]
fn ordered_backward(
    params: &NetworkParams,
    tape: &OrderedTape,
    d_logit: f64,
    first: &BranchTape,
    second: &BranchTape,
    d_first: &mut [Vec<f64>],
    d_second: &mut [Vec<f64>],
    grad: &mut [f64],
) {
    let l = &params.layout;
    let h2 = params.shape.hidden2;
    let hw = l.head_w;
    for (k, s) in tape.summary.iter().enumerate() {
        grad[hw + k] += d_logit * s;
    }
    grad[l.head_b] += d_logit;
    let n = tape.layer2.len();
    let w = params.data[hw..hw + 2 * h2].to_vec();
    let mut d_out = vec![vec![0.0; 2 * h2]; n];
    for k in 0..h2 {
        d_out[n - 1][k] += d_logit * w[k];
        // The backward direction's final state sits at original step 0.
        d_out[0][h2 + k] += d_logit * w[h2 + k];
    }
    let d_in = bi_backward(&params.data, l.l2f, l.l2b, &tape.layer2, &d_out, grad);
    let width = 2 * params.shape.hidden1;
    for (map, d_branch, offset) in [
        (alignment(first.outputs.len(), n), d_first, 0),
        (alignment(second.outputs.len(), n), d_second, width),
    ] {
        for (t, &(lo, frac)) in map.iter().enumerate() {
            let d = &d_in[t][offset..offset + width];
            for k in 0..width {
                d_branch[lo][k] += (1.0 - frac) * d[k];
                if frac != 0.0 {
                    d_branch[lo + 1][k] += frac * d[k];
                }
            }
        }
    }
}

fn check_sequence(params: &NetworkParams, xs: &[Vec<f64>]) -> Result<(), RnnError> {
    if xs.is_empty() {
        return Err(RnnError::EmptySequence);
    }
    for x in xs {
        if x.len() != params.shape.input {
            return Err(RnnError::InputWidth {
                got: x.len(),
                expected: params.shape.input,
            });
        }
    }
    Ok(())
}

/// Score of the ordered pair (first branch = `a`), not symmetrized.
pub fn ordered_score(params: &NetworkParams, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, RnnError> {
    check_sequence(params, a)?;
    check_sequence(params, b)?;
    let ba = branch_forward(params, a);
    let bb = branch_forward(params, b);
    Ok(sigmoid(ordered_forward(params, &ba, &bb).logit))
}

/// Symmetric pair score on raw sequences.
pub fn score_sequences(params: &NetworkParams, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, RnnError> {
    check_sequence(params, a)?;
    check_sequence(params, b)?;
    let ba = branch_forward(params, a);
    let bb = branch_forward(params, b);
    let ab = sigmoid(ordered_forward(params, &ba, &bb).logit);
    let ba_ = sigmoid(ordered_forward(params, &bb, &ba).logit);
    Ok(0.5 * (ab + ba_))
}

/// Symmetric similarity in (0, 1) of two normalized function matrices.
pub fn forward_pair(params: &NetworkParams, a: &FunctionMatrix, b: &FunctionMatrix) -> Result<f64, RnnError> {
    if !a.is_normalized() || !b.is_normalized() {
        return Err(RnnError::NotNormalized);
    }
    score_sequences(params, &matrix_to_sequence(a), &matrix_to_sequence(b))
}

const PROB_FLOOR: f64 = 1e-12;

fn bce(p: f64, label: f64) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Loss of one labelled pair and its gradient with respect to every
/// parameter.
pub fn pair_loss_and_gradient(
    params: &NetworkParams,
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    label: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.num_params()];
    let loss = accumulate_pair(params, a, b, label, 1.0, &mut grad);
    (loss, grad)
}

/// Adds `scale * dLoss/dParams` into `grad`; returns the unscaled loss.
fn accumulate_pair(params: &NetworkParams, a: &[Vec<f64>], b: &[Vec<f64>], label: f64, scale: f64, grad: &mut [f64]) -> f64 {
    let ba = branch_forward(params, a);
    let bb = branch_forward(params, b);
    let t_ab = ordered_forward(params, &ba, &bb);
    let t_ba = ordered_forward(params, &bb, &ba);
    let s_ab = sigmoid(t_ab.logit);
    let s_ba = sigmoid(t_ba.logit);
    let p = 0.5 * (s_ab + s_ba);
    let loss = bce(p, label);
    let pc = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let d_p = if pc != p { 0.0 } else { (p - label) / (p * (1.0 - p)) };
    let d_p = d_p * scale;

    let h1 = 2 * params.shape.hidden1;
    let mut d_a = vec![vec![0.0; h1]; ba.outputs.len()];
    let mut d_b = vec![vec![0.0; h1]; bb.outputs.len()];
    ordered_backward(params, &t_ab, d_p * 0.5 * s_ab * (1.0 - s_ab), &ba, &bb, &mut d_a, &mut d_b, grad);
    ordered_backward(params, &t_ba, d_p * 0.5 * s_ba * (1.0 - s_ba), &bb, &ba, &mut d_b, &mut d_a, grad);
    let l = &params.layout;
    bi_backward(&params.data, l.l1f, l.l1b, &ba.tape, &d_a, grad);
    bi_backward(&params.data, l.l1f, l.l1b, &bb.tape, &d_b, grad);
    loss
}

/// Mean loss over `pairs` evaluated at `params`, without gradients.
pub fn mean_loss(params: &NetworkParams, pairs: &PairSet, indices: &[usize]) -> f64 {
    let losses: Vec<f64> = indices
        .par_iter()
        .map(|&i| {
            let (a, b, y) = pairs.pair(i);
            bce(score_sequences(params, a, b).unwrap_or(0.5), y)
        })
        .collect();
    losses.iter().sum::<f64>() / indices.len().max(1) as f64
}

/// Labelled pairs of sequences. Sequences are stored once and referenced by
/// index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub sequences: Vec<Sequence>,
    /// (first, second, genuine)
    pub pairs: Vec<(usize, usize, bool)>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn push_sequence(&mut self, seq: Sequence) -> usize {
        self.sequences.push(seq);
        self.sequences.len() - 1
    }

    pub fn genuine_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.2).count()
    }

    pub fn impostor_count(&self) -> usize {
        self.len() - self.genuine_count()
    }

    fn pair(&self, i: usize) -> (&[Vec<f64>], &[Vec<f64>], f64) {
        let (a, b, g) = self.pairs[i];
        (&self.sequences[a], &self.sequences[b], if g { 1.0 } else { 0.0 })
    }
}

/// Genuine pairs: every (session 1, session 2) combination of the same user
/// and digit. Impostor pairs: same-digit (session 1 of one user, session 2 of
/// another) combinations, subsampled uniformly without replacement to the
/// genuine count.
pub fn build_pairs(dev: &Dataset, bank: &FeatureBank, seed: u64) -> Result<PairSet, RnnError> {
    let users = dev.users();
    let mut set = PairSet::default();
    let mut index = std::collections::BTreeMap::new();
    let mut seq_of = |set: &mut PairSet, key: &crate::capture::SampleKey| -> Option<usize> {
        if let Some(&i) = index.get(key) {
            return Some(i);
        }
        let m = bank.get(key)?;
        let i = set.push_sequence(matrix_to_sequence(m));
        index.insert(key.clone(), i);
        Some(i)
    };

    // Per digit, per user: session-1 and session-2 sequence ids.
    let mut by_digit: Vec<Vec<(Vec<usize>, Vec<usize>)>> = Vec::new();
    for digit in 0..10u8 {
        let mut per_user = Vec::new();
        for u in &users {
            let s1: Vec<usize> = dev
                .session_samples(u, digit, 1)
                .iter()
                .filter_map(|s| seq_of(&mut set, &s.key))
                .collect();
            let s2: Vec<usize> = dev
                .session_samples(u, digit, 2)
                .iter()
                .filter_map(|s| seq_of(&mut set, &s.key))
                .collect();
            per_user.push((s1, s2));
        }
        by_digit.push(per_user);
    }

    let mut genuine = Vec::new();
    for per_user in &by_digit {
        for (s1, s2) in per_user {
            for &a in s1 {
                for &b in s2 {
                    genuine.push((a, b, true));
                }
            }
        }
    }
    if genuine.is_empty() {
        return Err(RnnError::MissingSession);
    }

    // Enumerate the impostor universe as (digit, owner, attacker) blocks.
    let mut blocks: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut total = 0usize;
    for (d, per_user) in by_digit.iter().enumerate() {
        for (u, (s1, _)) in per_user.iter().enumerate() {
            for (v, (_, s2)) in per_user.iter().enumerate() {
                let n = s1.len() * s2.len();
                if u != v && n > 0 {
                    blocks.push((d, u, v, total));
                    total += n;
                }
            }
        }
    }
    if total == 0 {
        return Err(RnnError::ImpossiblePairing);
    }
    let count = genuine.len().min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, total, count).into_vec();
    picks.sort_unstable();
    let mut impostor = Vec::with_capacity(count);
    for idx in picks {
        let bi = blocks.partition_point(|b| b.3 <= idx) - 1;
        let (d, u, v, start) = blocks[bi];
        let (s1, _) = &by_digit[d][u];
        let (_, s2) = &by_digit[d][v];
        let off = idx - start;
        impostor.push((s1[off / s2.len()], s2[off % s2.len()], false));
    }
    if genuine.len() > count {
        let keep = rand::seq::index::sample(&mut rng, genuine.len(), count).into_vec();
        let mut keep = keep;
        keep.sort_unstable();
        genuine = keep.into_iter().map(|i| genuine[i]).collect();
    }
    set.pairs = genuine;
    set.pairs.extend(impostor);
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of pairs held out for early stopping; 0 disables it.
    pub holdout_fraction: f64,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            holdout_fraction: 0.1,
            patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch, measured as each batch is visited.
    pub loss_curve: Vec<f64>,
    /// Held-out loss after each epoch (empty without a holdout).
    pub holdout_curve: Vec<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,holdout_loss")?;
        for (e, l) in self.loss_curve.iter().enumerate() {
            match self.holdout_curve.get(e) {
                Some(h) => writeln!(w, "{},{},{}", e + 1, l, h)?,
                None => writeln!(w, "{},{},", e + 1, l)?,
            }
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Mini-batch training. Batch gradients are summed in pair order, so runs
/// are bit-reproducible for a given seed regardless of thread count.
pub fn train(
    params: &NetworkParams,
    data: &PairSet,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, TrainReport), RnnError> {
    if data.is_empty() {
        return Err(RnnError::EmptyPairSet);
    }
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(RnnError::BadConfig("learning rate must be a finite non-negative number".into()));
    }
    if cfg.batch_size == 0 {
        return Err(RnnError::BadConfig("batch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(RnnError::BadConfig("holdout fraction must be in [0, 1)".into()));
    }
    for seq in &data.sequences {
        check_sequence(params, seq)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let holdout_len = if cfg.holdout_fraction > 0.0 {
        ((data.len() as f64 * cfg.holdout_fraction).round() as usize).min(data.len() - 1)
    } else {
        0
    };
    let holdout: Vec<usize> = if holdout_len > 0 {
        order.shuffle(&mut rng);
        let mut h = order.split_off(data.len() - holdout_len);
        h.sort_unstable();
        order.sort_unstable();
        h
    } else {
        Vec::new()
    };
    let train_idx = order;

    let mut current = params.clone();
    let mut adam = Adam::new(current.num_params());
    let mut report = TrainReport::default();
    let mut best: Option<(f64, NetworkParams, usize)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let mut visit = train_idx.clone();
        visit.shuffle(&mut rng);
        let mut losses = vec![0.0; data.len()];
        for batch in visit.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let parts: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let (a, b, y) = data.pair(i);
                    let mut g = vec![0.0; current.num_params()];
                    let loss = accumulate_pair(&current, a, b, y, scale, &mut g);
                    (loss, g)
                })
                .collect();
            let mut grad = vec![0.0; current.num_params()];
            for (&i, (loss, g)) in batch.iter().zip(parts) {
                losses[i] = loss;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(RnnError::DivergedLoss { epoch });
            }
            adam.update(&mut current.data, &grad, cfg);
        }
        let epoch_loss = train_idx.iter().map(|&i| losses[i]).sum::<f64>() / train_idx.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(RnnError::DivergedLoss { epoch });
        }
        report.loss_curve.push(epoch_loss);

        if !holdout.is_empty() {
            let h = mean_loss(&current, data, &holdout);
            if !h.is_finite() {
                return Err(RnnError::DivergedLoss { epoch });
            }
            report.holdout_curve.push(h);
            if best.as_ref().is_none_or(|(b, _, _)| h < *b) {
                best = Some((h, current.clone(), epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    match best {
        Some((_, p, epoch)) => {
            report.best_epoch = Some(epoch);
            Ok((p, report))
        }
        None => Ok((current, report)),
    }
}
