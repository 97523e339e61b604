//! Minimal fully-connected network stack with exact reverse-mode gradients.
//!
//! Everything is 64-bit and allocation-conscious: matrices are flat row-major
//! slices, forward/backward reuse a [`Workspace`], and batch gradients are
//! accumulated in a fixed chunk order so results are bit-identical no matter
//! how many worker threads participate.
//!
//! The final layer is partitioned into named heads (noise vector, open logit,
//! score), each with its own output transform. Losses are declared per head
//! via [`LossSpec`]; [`grad`] differentiates the weighted sum exactly.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const BCE_CLAMP: f64 = 1e-7;

/// Batch slice size for gradient accumulation. Fixing it (rather than tying
/// it to the worker count) keeps the reduction order, and therefore every
/// bit of the result, independent of parallelism.
pub const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Output transform applied to one head's slice of the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub width: usize,
    pub kind: HeadKind,
}

impl HeadSpec {
    pub fn linear(name: &str, width: usize) -> Self {
        Self {
            name: name.into(),
            width,
            kind: HeadKind::Linear,
        }
    }

    pub fn sigmoid(name: &str, width: usize) -> Self {
        Self {
            name: name.into(),
            width,
            kind: HeadKind::Sigmoid,
        }
    }
}

/// Weights and biases shaped like an [`Mlp`]; also used for gradients and
/// Adam moment accumulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVec {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamVec {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        for w in &mut self.weights {
            w.fill(value);
        }
        for b in &mut self.biases {
            b.fill(value);
        }
    }

    /// `self += other`, elementwise; shapes must agree.
    pub fn add_assign(&mut self, other: &ParamVec) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut best = 0.0f64;
        for w in &self.weights {
            for &x in w {
                best = best.max(x.abs());
            }
        }
        for b in &self.biases {
            for &x in b {
                best = best.max(x.abs());
            }
        }
        best
    }
}

/// A fully-connected network: `layer_dims = [input, hidden..., output]`,
/// row-major weight matrices, hidden activation, and an input-standardization
/// pair baked in from suite statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layer_dims: Vec<usize>,
    /// Row-major `(out, in)` matrices, one per layer transition.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
    pub heads: Vec<HeadSpec>,
    /// Per-coordinate input mean subtracted before the first layer.
    pub norm_mean: Vec<f64>,
    /// Per-coordinate input standard deviation (floored away from zero).
    pub norm_std: Vec<f64>,
}

impl Mlp {
    /// Zero-initialized network. Hidden layers are usually re-initialized via
    /// [`Mlp::init_hidden`]; the final layer staying at zero makes an
    /// untrained network output exactly zero on linear heads and 0.5 on
    /// sigmoid heads.
    pub fn new(layer_dims: Vec<usize>, activation: Activation, heads: Vec<HeadSpec>) -> Self {
        assert!(layer_dims.len() >= 2, "need at least input and output dims");
        let head_total: usize = heads.iter().map(|h| h.width).sum();
        assert_eq!(
            head_total,
            *layer_dims.last().unwrap(),
            "head widths must partition the output layer"
        );
        let weights = (1..layer_dims.len())
            .map(|i| vec![0.0; layer_dims[i] * layer_dims[i - 1]])
            .collect();
        let biases = (1..layer_dims.len()).map(|i| vec![0.0; layer_dims[i]]).collect();
        let input = layer_dims[0];
        Self {
            layer_dims,
            weights,
            biases,
            activation,
            heads,
            norm_mean: vec![0.0; input],
            norm_std: vec![1.0; input],
        }
    }

    /// Randomizes hidden-layer weights (He for ReLU, Xavier for tanh) and
    /// leaves the final layer at zero.
    pub fn init_hidden(&mut self, rng: &mut impl Rng) {
        let layers = self.weights.len();
        for l in 0..layers.saturating_sub(1) {
            let fan_in = self.layer_dims[l] as f64;
            let std = match self.activation {
                Activation::Relu => (2.0 / fan_in).sqrt(),
                Activation::Tanh => (1.0 / fan_in).sqrt(),
            };
            for w in &mut self.weights[l] {
                *w = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    /// Randomizes every layer; used by gradient checks that need a non-zero
    /// output layer.
    pub fn init_all(&mut self, rng: &mut impl Rng) {
        for l in 0..self.weights.len() {
            let fan_in = self.layer_dims[l] as f64;
            let std = (1.0 / fan_in).sqrt();
            for w in &mut self.weights[l] {
                *w = std * rng.sample::<f64, _>(StandardNormal);
            }
            for b in &mut self.biases[l] {
                *b = 0.1 * std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Offset range of a head within the output layer.
    pub fn head_range(&self, index: usize) -> std::ops::Range<usize> {
        let start: usize = self.heads[..index].iter().map(|h| h.width).sum();
        start..start + self.heads[index].width
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.name == name)
    }

    /// Sets input standardization; `std` entries are floored at 1e-6.
    pub fn set_normalization(&mut self, mean: Vec<f64>, std: Vec<f64>) {
        assert_eq!(mean.len(), self.input_dim());
        assert_eq!(std.len(), self.input_dim());
        self.norm_mean = mean;
        self.norm_std = std.into_iter().map(|s| s.max(1e-6)).collect();
    }

    /// Runs the network and returns the head-transformed output layer.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut ws = Workspace::new(self);
        self.forward_ws(input, &mut ws)?;
        Ok(ws.output.clone())
    }

    /// Forward pass into a reusable workspace: `ws.output` holds the
    /// head-transformed outputs, `ws.acts` the post-activation layers.
    pub fn forward_ws(&self, input: &[f64], ws: &mut Workspace) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(CoreError::ShapeMismatch {
                what: "network input".into(),
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        for (o, ((x, m), s)) in ws.acts[0]
            .iter_mut()
            .zip(input.iter().zip(&self.norm_mean).zip(&self.norm_std))
        {
            *o = (x - m) / s;
        }
        let layers = self.weights.len();
        for l in 0..layers {
            let in_dim = self.layer_dims[l];
            let (prev, rest) = ws.acts.split_at_mut(l + 1);
            let src = &prev[l];
            let dst = &mut rest[0];
            let weights = &self.weights[l];
            for (row, (out, bias)) in dst.iter_mut().zip(&self.biases[l]).enumerate() {
                let w = &weights[row * in_dim..(row + 1) * in_dim];
                let mut acc = *bias;
                for (wi, xi) in w.iter().zip(src.iter()) {
                    acc += wi * xi;
                }
                *out = acc;
            }
            if l + 1 < layers {
                match self.activation {
                    Activation::Relu => {
                        for x in dst.iter_mut() {
                            if *x < 0.0 {
                                *x = 0.0;
                            }
                        }
                    }
                    Activation::Tanh => {
                        for x in dst.iter_mut() {
                            *x = x.tanh();
                        }
                    }
                }
            }
        }
        ws.output.copy_from_slice(&ws.acts[layers]);
        for (idx, head) in self.heads.iter().enumerate() {
            if head.kind == HeadKind::Sigmoid {
                for x in &mut ws.output[self.head_range(idx)] {
                    *x = sigmoid(*x);
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Workspace {
    /// `acts[0]` is the normalized input; `acts[l]` the post-activation
    /// output of layer `l` (raw logits for the final layer).
    pub acts: Vec<Vec<f64>>,
    /// Head-transformed final layer.
    pub output: Vec<f64>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Workspace {
    pub fn new(mlp: &Mlp) -> Self {
        let acts = mlp.layer_dims.iter().map(|&d| vec![0.0; d]).collect();
        let widest = *mlp.layer_dims.iter().max().unwrap();
        Self {
            acts,
            output: vec![0.0; mlp.output_dim()],
            delta: vec![0.0; widest],
            delta_next: vec![0.0; widest],
        }
    }
}

/// Pointwise loss attached to one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `‖out - target‖²`.
    SquaredL2,
    /// `‖out - target‖` (Euclidean, unsquared).
    L2,
    /// Binary cross-entropy on a sigmoid head, predictions clamped to
    /// `[1e-7, 1-1e-7]` before the logs.
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub head: usize,
    pub kind: LossKind,
    pub weight: f64,
}

/// Weighted sum of per-head losses; the per-sample loss is
/// `Σ_terms weight · loss(head output, target)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub terms: Vec<LossTerm>,
}

/// One training example: network input, one target slice per loss term, and
/// a per-sample weight applied to the whole sample loss.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
    pub weight: f64,
}

fn term_loss(kind: LossKind, out: &[f64], target: &[f64]) -> f64 {
    match kind {
        LossKind::SquaredL2 => out
            .iter()
            .zip(target)
            .map(|(o, t)| (o - t) * (o - t))
            .sum(),
        LossKind::L2 => out
            .iter()
            .zip(target)
            .map(|(o, t)| (o - t) * (o - t))
            .sum::<f64>()
            .sqrt(),
        LossKind::Bce => out
            .iter()
            .zip(target)
            .map(|(o, t)| {
                let p = o.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum(),
    }
}

/// Mean per-sample loss over a batch; the forward-only counterpart of
/// [`grad`], shared by finite-difference checks.
pub fn batch_loss(mlp: &Mlp, batch: &[Sample], spec: &LossSpec) -> Result<f64> {
    let mut ws = Workspace::new(mlp);
    let mut total = 0.0;
    for (idx, sample) in batch.iter().enumerate() {
        mlp.forward_ws(&sample.input, &mut ws)?;
        let mut loss = 0.0;
        for (term, target) in spec.terms.iter().zip(&sample.targets) {
            let range = mlp.head_range(term.head);
            loss += term.weight * term_loss(term.kind, &ws.output[range], target);
        }
        if !loss.is_finite() {
            return Err(CoreError::NonFiniteLoss { sample: idx });
        }
        total += sample.weight * loss;
    }
    Ok(total / batch.len() as f64)
}

/// Exact reverse-mode gradient of the mean per-sample loss, plus the loss
/// value itself. Samples are accumulated in fixed chunks of [`GRAD_CHUNK`]
/// so the floating-point reduction order never depends on threading.
pub fn grad(mlp: &Mlp, batch: &[Sample], spec: &LossSpec) -> Result<(ParamVec, f64)> {
    if batch.is_empty() {
        return Err(CoreError::Config("grad: empty batch".into()));
    }
    let chunks: Vec<&[Sample]> = batch.chunks(GRAD_CHUNK).collect();
    let results: Vec<Result<(ParamVec, f64)>> = if rayon::current_num_threads() > 1
        && chunks.len() > 1
    {
        use rayon::prelude::*;
        chunks
            .par_iter()
            .enumerate()
            .map(|(ci, chunk)| grad_chunk(mlp, chunk, spec, ci * GRAD_CHUNK))
            .collect()
    } else {
        chunks
            .iter()
            .enumerate()
            .map(|(ci, chunk)| grad_chunk(mlp, chunk, spec, ci * GRAD_CHUNK))
            .collect()
    };
    let mut grads = ParamVec::zeros_like(mlp);
    let mut loss = 0.0;
    for r in results {
        let (g, l) = r?;
        grads.add_assign(&g);
        loss += l;
    }
    let scale = 1.0 / batch.len() as f64;
    for w in &mut grads.weights {
        for x in w {
            *x *= scale;
        }
    }
    for b in &mut grads.biases {
        for x in b {
            *x *= scale;
        }
    }
    Ok((grads, loss * scale))
}

/// Sequential gradient sum over one chunk (unscaled by batch size).
fn grad_chunk(
    mlp: &Mlp,
    chunk: &[Sample],
    spec: &LossSpec,
    base_index: usize,
) -> Result<(ParamVec, f64)> {
    let mut ws = Workspace::new(mlp);
    let mut grads = ParamVec::zeros_like(mlp);
    let mut loss_sum = 0.0;
    let layers = mlp.weights.len();
    for (offset, sample) in chunk.iter().enumerate() {
        mlp.forward_ws(&sample.input, &mut ws)?;

        // Per-sample loss and dL/dz on the raw output layer.
        let out_dim = mlp.output_dim();
        ws.delta[..out_dim].fill(0.0);
        let mut loss = 0.0;
        for (term, target) in spec.terms.iter().zip(&sample.targets) {
            let range = mlp.head_range(term.head);
            let head_kind = mlp.heads[term.head].kind;
            let out = &ws.output[range.clone()];
            loss += term.weight * term_loss(term.kind, out, target);
            match term.kind {
                LossKind::SquaredL2 => {
                    for (j, (o, t)) in out.iter().zip(target).enumerate() {
                        let mut d = 2.0 * (o - t);
                        if head_kind == HeadKind::Sigmoid {
                            d *= o * (1.0 - o);
                        }
                        ws.delta[range.start + j] += term.weight * d;
                    }
                }
                LossKind::L2 => {
                    let norm = out
                        .iter()
                        .zip(target)
                        .map(|(o, t)| (o - t) * (o - t))
                        .sum::<f64>()
                        .sqrt();
                    if norm > 0.0 {
                        for (j, (o, t)) in out.iter().zip(target).enumerate() {
                            let mut d = (o - t) / norm;
                            if head_kind == HeadKind::Sigmoid {
                                d *= o * (1.0 - o);
                            }
                            ws.delta[range.start + j] += term.weight * d;
                        }
                    }
                }
                LossKind::Bce => {
                    // d/dz of BCE(sigmoid(z)) is (p - t) while p is inside
                    // the clamp range, zero outside it.
                    debug_assert_eq!(head_kind, HeadKind::Sigmoid);
                    for (j, (o, t)) in out.iter().zip(target).enumerate() {
                        if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(o) {
                            ws.delta[range.start + j] += term.weight * (o - t);
                        }
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                sample: base_index + offset,
            });
        }
        loss_sum += sample.weight * loss;

        // Backpropagate through the stack.
        let sample_scale = sample.weight;
        for l in (0..layers).rev() {
            let in_dim = mlp.layer_dims[l];
            let out_dim = mlp.layer_dims[l + 1];
            let src = &ws.acts[l];
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            for o in 0..out_dim {
                let d = ws.delta[o] * sample_scale;
                if d != 0.0 {
                    let row = &mut gw[o * in_dim..(o + 1) * in_dim];
                    for (g, x) in row.iter_mut().zip(src.iter()) {
                        *g += d * x;
                    }
                    gb[o] += d;
                }
            }
            if l > 0 {
                let weights = &mlp.weights[l];
                ws.delta_next[..in_dim].fill(0.0);
                for o in 0..out_dim {
                    let d = ws.delta[o];
                    if d != 0.0 {
                        let row = &weights[o * in_dim..(o + 1) * in_dim];
                        for (acc, w) in ws.delta_next[..in_dim].iter_mut().zip(row) {
                            *acc += d * w;
                        }
                    }
                }
                // Activation derivative uses the post-activation value.
                match mlp.activation {
                    Activation::Relu => {
                        for (dn, a) in ws.delta_next[..in_dim].iter_mut().zip(src) {
                            if *a <= 0.0 {
                                *dn = 0.0;
                            }
                        }
                    }
                    Activation::Tanh => {
                        for (dn, a) in ws.delta_next[..in_dim].iter_mut().zip(src) {
                            *dn *= 1.0 - a * a;
                        }
                    }
                }
                std::mem::swap(&mut ws.delta, &mut ws.delta_next);
            }
        }
    }
    Ok((grads, loss_sum))
}
