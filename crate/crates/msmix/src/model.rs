//! A small text classifier with hand-written backpropagation.
//!
//! Architecture: embedding lookup (layer 0), `m` per-position blocks of
//! `tanh(h·W + b)` with an optional residual connection, mean pooling over
//! the real (non-padding) positions, and an affine softmax head. Every block
//! keeps the `I×d` hidden shape, which is what the dimension-swap masks
//! operate on.
//!
//! The forward pass can stop at any layer `k`, hand the hidden state out for
//! mixing, and resume from `k`; [`backward_mixed`] then routes the upstream
//! gradient through the mask (or the interpolation weights) back into both
//! samples' lower layers. The mask itself is a hard selection and carries no
//! gradient.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::augment::{MaskMatrix, MixPlan, MixStrategy};
use crate::tensor::{softmax, Matrix, Rng, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer {layer} outside [0, {depth}]")]
    LayerOutOfRange { layer: usize, depth: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("effective length {len} invalid for {rows} positions")]
    BadEffectiveLen { len: usize, rows: usize },
    #[error("hidden width {got} does not match model width {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("token sequence is empty")]
    EmptyTokens,
    #[error("trace stops at layer {got}, plan mixes at layer {expected}")]
    TraceLayerMismatch { expected: usize, got: usize },
    #[error("swap plan carries no mask")]
    MissingMask,
    #[error("label vectors differ in length: {0} vs {1}")]
    LabelLengthMismatch(usize, usize),
    #[error("vector off the probability simplex: sum {0}")]
    OffSimplex(f64),
    #[error("checkpoint i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// One hidden block: per-position affine `d→d` plus tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Classification head: affine `d→C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// All learnable parameters. Also serves as the gradient carrier, so batch
/// accumulation and the SGD step are plain element-wise arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// V×d token embedding; row 0 belongs to PAD and is never read because
    /// padding positions are hard zeros.
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
    pub head: Head,
    pub residual: bool,
}

impl ModelParams {
    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn width(&self) -> usize {
        self.embedding.cols()
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn classes(&self) -> usize {
        self.head.bias.len()
    }

    /// Zero gradient accumulator with matching shapes.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            embedding: Matrix::zeros(self.vocab_size(), self.width()),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    weight: Matrix::zeros(b.weight.rows(), b.weight.cols()),
                    bias: vec![0.0; b.bias.len()],
                })
                .collect(),
            head: Head {
                weight: Matrix::zeros(self.head.weight.rows(), self.head.weight.cols()),
                bias: vec![0.0; self.head.bias.len()],
            },
            residual: self.residual,
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = self.embedding.values().len();
        for b in &self.blocks {
            n += b.weight.values().len() + b.bias.len();
        }
        n + self.head.weight.values().len() + self.head.bias.len()
    }

    fn slot(&mut self, index: usize) -> &mut f64 {
        let mut idx = index;
        let e = self.embedding.values().len();
        if idx < e {
            return &mut self.embedding.values_mut()[idx];
        }
        idx -= e;
        for b in &mut self.blocks {
            let w = b.weight.values().len();
            if idx < w {
                return &mut b.weight.values_mut()[idx];
            }
            idx -= w;
            if idx < b.bias.len() {
                return &mut b.bias[idx];
            }
            idx -= b.bias.len();
        }
        let w = self.head.weight.values().len();
        if idx < w {
            return &mut self.head.weight.values_mut()[idx];
        }
        idx -= w;
        &mut self.head.bias[idx]
    }

    /// Reads one scalar by its linear index (embedding, then blocks, then
    /// head; row-major within each tensor).
    pub fn param(&mut self, index: usize) -> f64 {
        *self.slot(index)
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        *self.slot(index) = value;
    }

    /// `self += other`, shape-for-shape.
    pub fn accumulate(&mut self, other: &ModelParams) {
        self.embedding.add_assign(&other.embedding);
        for (b, o) in self.blocks.iter_mut().zip(&other.blocks) {
            b.weight.add_assign(&o.weight);
            for (x, y) in b.bias.iter_mut().zip(&o.bias) {
                *x += y;
            }
        }
        self.head.weight.add_assign(&other.head.weight);
        for (x, y) in self.head.bias.iter_mut().zip(&other.head.bias) {
            *x += y;
        }
    }

    /// `self *= factor`.
    pub fn scale(&mut self, factor: f64) {
        self.embedding.scale(factor);
        for b in &mut self.blocks {
            b.weight.scale(factor);
            for x in &mut b.bias {
                *x *= factor;
            }
        }
        self.head.weight.scale(factor);
        for x in &mut self.head.bias {
            *x *= factor;
        }
    }

    /// Plain gradient-descent update: `self -= learning_rate * grads`.
    pub fn sgd_step(&mut self, grads: &ModelParams, learning_rate: f64) {
        let mut scaled = grads.clone();
        scaled.scale(-learning_rate);
        self.accumulate(&scaled);
    }
}

/// Embedding and block weights uniform on (−s, s] with `s = 1/sqrt(d)`;
/// biases and the whole head are zero, so the first-batch loss is exactly
/// `ln C` and the first update moves only the head.
pub fn init_params(
    vocab: usize,
    width: usize,
    depth: usize,
    classes: usize,
    residual: bool,
    rng: &mut Rng,
) -> ModelParams {
    let scale = 1.0 / (width as f64).sqrt();
    let mut draw = |n: usize| -> Matrix {
        let values: Vec<f64> = (0..n).map(|_| scale * (1.0 - 2.0 * rng.next_f64())).collect();
        Matrix::new(n / width, width, values).expect("finite init")
    };
    let embedding = draw(vocab * width);
    let blocks = (0..depth)
        .map(|_| Block { weight: draw(width * width), bias: vec![0.0; width] })
        .collect();
    ModelParams {
        embedding,
        blocks,
        head: Head { weight: Matrix::zeros(width, classes), bias: vec![0.0; classes] },
        residual,
    }
}

// ---------------------------------------------------------------------------
// Hidden state and traces
// ---------------------------------------------------------------------------

/// An I×d slice of activations for one sample at some layer. Positions at and
/// beyond `effective_len` are padding: zero at layer 0 and excluded from
/// pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub values: Matrix,
    pub effective_len: usize,
}

impl HiddenState {
    pub fn new(values: Matrix, effective_len: usize) -> Result<Self, ModelError> {
        if effective_len == 0 || effective_len > values.rows() {
            return Err(ModelError::BadEffectiveLen { len: effective_len, rows: values.rows() });
        }
        Ok(HiddenState { values, effective_len })
    }

    pub(crate) fn raw(values: Matrix, effective_len: usize) -> Self {
        debug_assert!(effective_len >= 1 && effective_len <= values.rows());
        HiddenState { values, effective_len }
    }
}

/// Activations cached on the way up to the mixing layer: `hidden[t]` is
/// `h^t`, `t = 0..=k`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    pub effective_len: usize,
    pub hidden: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn top_layer(&self) -> usize {
        self.hidden.len() - 1
    }
}

/// Activations cached from the injected state to the prediction:
/// `hidden[0]` is the (possibly mixed) `h^k`, `hidden.last()` is `h^m`.
#[derive(Debug, Clone)]
pub struct TailTrace {
    pub start_layer: usize,
    pub effective_len: usize,
    pub hidden: Vec<Matrix>,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub prediction: Vec<f64>,
}

fn block_forward(input: &Matrix, block: &Block, residual: bool) -> Matrix {
    let (rows, d) = (input.rows(), input.cols());
    let mut out = Matrix::zeros(rows, d);
    let w = block.weight.values();
    for r in 0..rows {
        let x = input.row(r);
        let o = out.row_mut(r);
        o.copy_from_slice(&block.bias);
        for (k, &xk) in x.iter().enumerate() {
            let wrow = &w[k * d..(k + 1) * d];
            for (oc, &wkc) in o.iter_mut().zip(wrow) {
                *oc += xk * wkc;
            }
        }
        for (c, oc) in o.iter_mut().enumerate() {
            *oc = oc.tanh();
            if residual {
                *oc += x[c];
            }
        }
    }
    out
}

/// Forwards a padded token sequence through layers `1..=k` and returns the
/// hidden state at `k` together with the cached activations. `k = 0` returns
/// the raw embedding rows.
pub fn forward_to(
    tokens: &[usize],
    effective_len: usize,
    layer: usize,
    params: &ModelParams,
) -> Result<(HiddenState, ForwardTrace), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyTokens);
    }
    if layer > params.depth() {
        return Err(ModelError::LayerOutOfRange { layer, depth: params.depth() });
    }
    if effective_len == 0 || effective_len > tokens.len() {
        return Err(ModelError::BadEffectiveLen { len: effective_len, rows: tokens.len() });
    }
    let d = params.width();
    let mut h0 = Matrix::zeros(tokens.len(), d);
    for (r, &id) in tokens.iter().enumerate().take(effective_len) {
        if id >= params.vocab_size() {
            return Err(ModelError::TokenOutOfRange { id, vocab: params.vocab_size() });
        }
        h0.row_mut(r).copy_from_slice(params.embedding.row(id));
    }
    let mut hidden = Vec::with_capacity(layer + 1);
    hidden.push(h0);
    for t in 0..layer {
        let next = block_forward(&hidden[t], &params.blocks[t], params.residual);
        hidden.push(next);
    }
    let state = HiddenState::raw(hidden[layer].clone(), effective_len);
    Ok((state, ForwardTrace { tokens: tokens.to_vec(), effective_len, hidden }))
}

/// Runs blocks `k+1..=m`, mean-pools the first `effective_len` positions,
/// applies the head and softmax.
pub fn forward_from(
    state: &HiddenState,
    layer: usize,
    params: &ModelParams,
) -> Result<(Vec<f64>, TailTrace), ModelError> {
    let depth = params.depth();
    if layer > depth {
        return Err(ModelError::LayerOutOfRange { layer, depth });
    }
    if state.values.cols() != params.width() {
        return Err(ModelError::WidthMismatch {
            got: state.values.cols(),
            expected: params.width(),
        });
    }
    let mut hidden = Vec::with_capacity(depth - layer + 1);
    hidden.push(state.values.clone());
    for t in layer..depth {
        let next = block_forward(hidden.last().unwrap(), &params.blocks[t], params.residual);
        hidden.push(next);
    }
    let top = hidden.last().unwrap();
    let span = state.effective_len.min(top.rows());
    let d = params.width();
    let mut pooled = vec![0.0; d];
    for r in 0..span {
        for (p, &v) in pooled.iter_mut().zip(top.row(r)) {
            *p += v;
        }
    }
    for p in &mut pooled {
        *p /= span as f64;
    }
    let classes = params.classes();
    let mut logits = params.head.bias.clone();
    let hw = params.head.weight.values();
    for (k, &pk) in pooled.iter().enumerate() {
        let wrow = &hw[k * classes..(k + 1) * classes];
        for (l, &w) in logits.iter_mut().zip(wrow) {
            *l += pk * w;
        }
    }
    let prediction = softmax(&logits)?;
    let tail = TailTrace {
        start_layer: layer,
        effective_len: span,
        hidden,
        pooled,
        logits,
        prediction: prediction.clone(),
    };
    Ok((prediction, tail))
}

/// Full unmixed forward pass; returns the prediction with both trace halves.
pub fn forward(
    tokens: &[usize],
    effective_len: usize,
    params: &ModelParams,
) -> Result<(Vec<f64>, ForwardTrace, TailTrace), ModelError> {
    let (state, trace) = forward_to(tokens, effective_len, params.depth(), params)?;
    let (prediction, tail) = forward_from(&state, params.depth(), params)?;
    Ok((prediction, trace, tail))
}

/// `−Σ_c y[c]·ln(max(ŷ[c], 1e-12))`. The clamp bounds the loss when a
/// prediction collapses to zero probability on a labeled class.
pub fn cross_entropy(y_true: &[f64], y_hat: &[f64]) -> Result<f64, ModelError> {
    if y_true.len() != y_hat.len() {
        return Err(ModelError::LabelLengthMismatch(y_true.len(), y_hat.len()));
    }
    for y in [y_true, y_hat] {
        let sum: f64 = y.iter().sum();
        // Negated form so a NaN sum fails the check too.
        if !((sum - 1.0).abs() <= 1e-9) {
            return Err(ModelError::OffSimplex(sum));
        }
    }
    Ok(-y_true.iter().zip(y_hat).map(|(t, p)| t * p.max(1e-12).ln()).sum::<f64>())
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// d(tanh block)/d(input, W, b) for one layer. `upstream` is dL/dh_out;
// returns dL/dh_in and accumulates into the gradient carriers.
fn block_backward(
    input: &Matrix,
    output: &Matrix,
    upstream: &Matrix,
    block: &Block,
    residual: bool,
    grad_weight: &mut Matrix,
    grad_bias: &mut [f64],
) -> Matrix {
    let (rows, d) = (input.rows(), input.cols());
    let mut downstream = Matrix::zeros(rows, d);
    let w = block.weight.values();
    let gw = grad_weight.values_mut();
    let mut dz = vec![0.0; d];
    for r in 0..rows {
        let x = input.row(r);
        let h = output.row(r);
        let g = upstream.row(r);
        for c in 0..d {
            // tanh output of this layer; with residual the stored state is
            // a + x, so recover a first.
            let a = if residual { h[c] - x[c] } else { h[c] };
            dz[c] = g[c] * (1.0 - a * a);
        }
        for (b, &z) in grad_bias.iter_mut().zip(&dz) {
            *b += z;
        }
        let down = downstream.row_mut(r);
        for (k, &xk) in x.iter().enumerate() {
            let wrow = &w[k * d..(k + 1) * d];
            let gwrow = &mut gw[k * d..(k + 1) * d];
            let mut acc = 0.0;
            for c in 0..d {
                gwrow[c] += xk * dz[c];
                acc += dz[c] * wrow[c];
            }
            down[k] = acc + if residual { g[k] } else { 0.0 };
        }
    }
    downstream
}

// Backprop from the prediction down to the injected hidden state; returns
// dL/dh^k for the mixed path.
fn tail_backward(
    tail: &TailTrace,
    y_true: &[f64],
    params: &ModelParams,
    grads: &mut ModelParams,
) -> Matrix {
    let d = params.width();
    let classes = params.classes();
    // Softmax + cross-entropy fuse to prediction − target (away from the
    // log clamp, which only engages at ~1e-12 probabilities).
    let dlogits: Vec<f64> = tail.prediction.iter().zip(y_true).map(|(p, t)| p - t).collect();
    for (c, &dl) in dlogits.iter().enumerate() {
        grads.head.bias[c] += dl;
    }
    let hw = params.head.weight.values();
    let ghw = grads.head.weight.values_mut();
    let mut dpooled = vec![0.0; d];
    for k in 0..d {
        let wrow = &hw[k * classes..(k + 1) * classes];
        let gwrow = &mut ghw[k * classes..(k + 1) * classes];
        let mut acc = 0.0;
        for c in 0..classes {
            gwrow[c] += tail.pooled[k] * dlogits[c];
            acc += dlogits[c] * wrow[c];
        }
        dpooled[k] = acc;
    }
    let top = tail.hidden.last().unwrap();
    let span = tail.effective_len;
    let mut upstream = Matrix::zeros(top.rows(), d);
    for r in 0..span {
        let row = upstream.row_mut(r);
        for (slot, &dp) in row.iter_mut().zip(&dpooled) {
            *slot = dp / span as f64;
        }
    }
    // Blocks above the mixing layer, top down.
    for step in (1..tail.hidden.len()).rev() {
        let block_index = tail.start_layer + step - 1;
        let block = &params.blocks[block_index];
        let grad_block = &mut grads.blocks[block_index];
        upstream = block_backward(
            &tail.hidden[step - 1],
            &tail.hidden[step],
            &upstream,
            block,
            params.residual,
            &mut grad_block.weight,
            &mut grad_block.bias,
        );
    }
    upstream
}

// Backprop one sample's lower half (blocks k..1 plus the embedding rows).
fn front_backward(
    trace: &ForwardTrace,
    mut upstream: Matrix,
    params: &ModelParams,
    grads: &mut ModelParams,
) {
    for step in (1..trace.hidden.len()).rev() {
        let block_index = step - 1;
        let block = &params.blocks[block_index];
        let grad_block = &mut grads.blocks[block_index];
        upstream = block_backward(
            &trace.hidden[step - 1],
            &trace.hidden[step],
            &upstream,
            block,
            params.residual,
            &mut grad_block.weight,
            &mut grad_block.bias,
        );
    }
    // Layer 0 is an embedding lookup for real positions; padding rows are
    // constants and contribute nothing.
    for (r, &token) in trace.tokens.iter().enumerate().take(trace.effective_len) {
        let g = upstream.row(r);
        let e = grads.embedding.row_mut(token);
        for (slot, &v) in e.iter_mut().zip(g) {
            *slot += v;
        }
    }
}

/// Gradient of `cross_entropy(y_true, ŷ)` for an unmixed forward pass.
pub fn backward(
    trace: &ForwardTrace,
    tail: &TailTrace,
    y_true: &[f64],
    params: &ModelParams,
) -> Result<ModelParams, ModelError> {
    if trace.top_layer() != tail.start_layer {
        return Err(ModelError::TraceLayerMismatch {
            expected: tail.start_layer,
            got: trace.top_layer(),
        });
    }
    let mut grads = params.zeros_like();
    let upstream = tail_backward(tail, y_true, params, &mut grads);
    front_backward(trace, upstream, params, &mut grads);
    Ok(grads)
}

fn split_by_mask(upstream: &Matrix, mask: &MaskMatrix) -> (Matrix, Matrix) {
    let (rows, cols) = (upstream.rows(), upstream.cols());
    let mut to_i = Matrix::zeros(rows, cols);
    let mut to_j = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let g = upstream.get(r, c);
            if mask.keeps(r, c) {
                to_i.set(r, c, g);
            } else {
                to_j.set(r, c, g);
            }
        }
    }
    (to_i, to_j)
}

fn scale_matrix(m: &Matrix, factor: f64) -> Matrix {
    let mut out = m.clone();
    out.scale(factor);
    out
}

/// Gradient of the mixed-sample loss with respect to every parameter.
///
/// Blocks above the mixing layer see one path through the mixed state. At
/// the mixing point the upstream gradient `g` splits — `M ⊙ g` to sample
/// `i`, `(1 − M) ⊙ g` to sample `j` for swaps, `λ·g` / `(1−λ)·g` for linear
/// — and blocks at or below the layer plus the embedding accumulate both
/// paths. The mask is a frozen selection: no gradient flows through the
/// argmax that produced it.
pub fn backward_mixed(
    trace_i: &ForwardTrace,
    trace_j: &ForwardTrace,
    plan: &MixPlan,
    tail: &TailTrace,
    y_mixed: &[f64],
    params: &ModelParams,
) -> Result<ModelParams, ModelError> {
    if plan.strategy == MixStrategy::None {
        return backward(trace_i, tail, y_mixed, params);
    }
    for trace in [trace_i, trace_j] {
        if trace.top_layer() != plan.layer {
            return Err(ModelError::TraceLayerMismatch {
                expected: plan.layer,
                got: trace.top_layer(),
            });
        }
    }
    if tail.start_layer != plan.layer {
        return Err(ModelError::TraceLayerMismatch {
            expected: plan.layer,
            got: tail.start_layer,
        });
    }
    let mut grads = params.zeros_like();
    let upstream = tail_backward(tail, y_mixed, params, &mut grads);
    let (to_i, to_j) = match plan.strategy {
        MixStrategy::Linear => (
            scale_matrix(&upstream, plan.lambda),
            scale_matrix(&upstream, 1.0 - plan.lambda),
        ),
        _ => {
            let mask = plan.mask.as_ref().ok_or(ModelError::MissingMask)?;
            split_by_mask(&upstream, mask)
        }
    };
    front_backward(trace_i, to_i, params, &mut grads);
    front_backward(trace_j, to_j, params, &mut grads);
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"MSMIXPK1";

/// Writes the parameters to a versioned little-endian binary file:
/// the 8-byte magic `MSMIXPK1`, the dims `V, d, m, C` as u64, one residual
/// byte, then every value as f64 — embedding, each block's weight and bias,
/// head weight and bias, all row-major. Loading reproduces the parameters
/// bit for bit, so resumed runs are identical.
pub fn save_params(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for dim in [params.vocab_size(), params.width(), params.depth(), params.classes()] {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    out.push(params.residual as u8);
    let mut write_values = |values: &[f64]| {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    write_values(params.embedding.values());
    for b in &params.blocks {
        write_values(b.weight.values());
        write_values(&b.bias);
    }
    write_values(params.head.weight.values());
    write_values(&params.head.bias);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        if *cursor + n > bytes.len() {
            return Err(ModelError::BadCheckpoint("file truncated".into()));
        }
        let slice = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };
    if take(&mut cursor, 8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::BadCheckpoint("unrecognized magic/version".into()));
    }
    let mut dims = [0usize; 4];
    for dim in &mut dims {
        let raw = take(&mut cursor, 8)?;
        *dim = u64::from_le_bytes(raw.try_into().unwrap()) as usize;
    }
    let [vocab, width, depth, classes] = dims;
    if vocab == 0 || width == 0 || classes == 0 {
        return Err(ModelError::BadCheckpoint(format!(
            "degenerate dims V={vocab} d={width} m={depth} C={classes}"
        )));
    }
    let residual = match take(&mut cursor, 1)?[0] {
        0 => false,
        1 => true,
        other => return Err(ModelError::BadCheckpoint(format!("bad residual byte {other}"))),
    };
    let read_values = |cursor: &mut usize, n: usize| -> Result<Vec<f64>, ModelError> {
        let raw = take(cursor, n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let embedding = Matrix::new(vocab, width, read_values(&mut cursor, vocab * width)?)?;
    let mut blocks = Vec::with_capacity(depth);
    for _ in 0..depth {
        let weight = Matrix::new(width, width, read_values(&mut cursor, width * width)?)?;
        let bias = read_values(&mut cursor, width)?;
        blocks.push(Block { weight, bias });
    }
    let head_weight = Matrix::new(width, classes, read_values(&mut cursor, width * classes)?)?;
    let head_bias = read_values(&mut cursor, classes)?;
    if cursor != bytes.len() {
        return Err(ModelError::BadCheckpoint("trailing bytes".into()));
    }
    Ok(ModelParams {
        embedding,
        blocks,
        head: Head { weight: head_weight, bias: head_bias },
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{
        apply_mask, linear_mix, pool_count, random_mask, swap_count, MaskMatrix, MixStrategy,
        RowScope,
    };
    use crate::tensor::IndexSet;

    fn one_hot(class: usize, classes: usize) -> Vec<f64> {
        let mut y = vec![0.0; classes];
        y[class] = 1.0;
        y
    }

    fn tiny_params(seed: u64, residual: bool) -> ModelParams {
        let mut rng = Rng::new(seed);
        let mut params = init_params(20, 8, 3, 4, residual, &mut rng);
        // Gradient tests need a live head; init leaves it zero.
        for slot in params.head.weight.values_mut() {
            *slot = rng.next_f64() - 0.5;
        }
        for slot in &mut params.head.bias {
            *slot = rng.next_f64() - 0.5;
        }
        params
    }

    fn random_tokens(len: usize, total: usize, vocab: usize, rng: &mut Rng) -> Vec<usize> {
        let mut tokens: Vec<usize> = (0..total)
            .map(|r| if r < len { 2 + rng.below(vocab - 2) } else { 0 })
            .collect();
        tokens.truncate(total);
        tokens
    }

    // Central-difference oracle over every parameter; forward-only, so it is
    // independent of the backward implementation it checks.
    fn finite_difference(
        params: &ModelParams,
        loss: impl Fn(&ModelParams) -> f64,
        eps: f64,
    ) -> Vec<f64> {
        let mut grads = Vec::with_capacity(params.param_count());
        let mut work = params.clone();
        for idx in 0..params.param_count() {
            let original = work.param(idx);
            work.set_param(idx, original + eps);
            let plus = loss(&work);
            work.set_param(idx, original - eps);
            let minus = loss(&work);
            work.set_param(idx, original);
            grads.push((plus - minus) / (2.0 * eps));
        }
        grads
    }

    fn max_relative_error(analytic: &ModelParams, numeric: &[f64]) -> f64 {
        let mut a = analytic.clone();
        let mut worst: f64 = 0.0;
        for (idx, &n) in numeric.iter().enumerate() {
            let g = a.param(idx);
            let denom = g.abs().max(n.abs());
            if denom < 1e-7 {
                continue;
            }
            worst = worst.max((g - n).abs() / denom);
        }
        worst
    }

    #[test]
    fn layer_zero_is_the_embedding() {
        let params = tiny_params(1, false);
        let tokens = vec![3, 5, 7, 0, 0, 0];
        let (state, trace) = forward_to(&tokens, 3, 0, &params).unwrap();
        assert_eq!(trace.hidden.len(), 1);
        for r in 0..3 {
            assert_eq!(state.values.row(r), params.embedding.row(tokens[r]));
        }
        for r in 3..6 {
            assert!(state.values.row(r).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn split_point_is_invisible() {
        for residual in [false, true] {
            let params = tiny_params(2, residual);
            let mut rng = Rng::new(3);
            let tokens = random_tokens(5, 6, params.vocab_size(), &mut rng);
            let (reference, _, _) = forward(&tokens, 5, &params).unwrap();
            for k in 0..=params.depth() {
                let (state, _) = forward_to(&tokens, 5, k, &params).unwrap();
                let (prediction, _) = forward_from(&state, k, &params).unwrap();
                assert_eq!(prediction, reference, "split at layer {k}");
            }
        }
    }

    #[test]
    fn zero_blocks_collapse_to_zero() {
        let mut params = tiny_params(4, false);
        for b in &mut params.blocks {
            b.weight = Matrix::zeros(8, 8);
            b.bias = vec![0.0; 8];
        }
        let tokens = vec![2, 3, 4, 0, 0, 0];
        for k in 1..=params.depth() {
            let (state, _) = forward_to(&tokens, 3, k, &params).unwrap();
            assert!(state.values.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_from_at_top_is_pool_and_head_only() {
        let params = tiny_params(5, false);
        let mut rng = Rng::new(6);
        let tokens = random_tokens(4, 6, params.vocab_size(), &mut rng);
        let (state, _) = forward_to(&tokens, 4, params.depth(), &params).unwrap();
        let (_, tail) = forward_from(&state, params.depth(), &params).unwrap();
        assert_eq!(tail.hidden.len(), 1);
    }

    #[test]
    fn zero_head_predicts_uniform() {
        let mut rng = Rng::new(7);
        let params = init_params(20, 8, 3, 4, false, &mut rng);
        let tokens = random_tokens(6, 6, 20, &mut rng);
        let (prediction, _, _) = forward(&tokens, 6, &params).unwrap();
        for &p in &prediction {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn predictions_are_normalized() {
        let params = tiny_params(8, true);
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let len = 1 + rng.below(6);
            let tokens = random_tokens(len, 6, params.vocab_size(), &mut rng);
            let (prediction, _, _) = forward(&tokens, len, &params).unwrap();
            assert!((prediction.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(prediction.iter().all(|&p| p.is_finite() && p >= 0.0));
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let params = tiny_params(10, false);
        assert!(matches!(
            forward_to(&[1, 2], 2, 9, &params),
            Err(ModelError::LayerOutOfRange { .. })
        ));
        assert!(matches!(
            forward_to(&[1, 99], 2, 1, &params),
            Err(ModelError::TokenOutOfRange { id: 99, .. })
        ));
        assert!(matches!(forward_to(&[], 1, 1, &params), Err(ModelError::EmptyTokens)));
        let wide = HiddenState::new(Matrix::zeros(3, 5), 3).unwrap();
        assert!(matches!(
            forward_from(&wide, 1, &params),
            Err(ModelError::WidthMismatch { got: 5, expected: 8 })
        ));
    }

    #[test]
    fn cross_entropy_worked_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        let uniform = vec![0.25; 4];
        let loss = cross_entropy(&[0.1, 0.2, 0.3, 0.4], &uniform).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        let half = cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((half - 2.0f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[1.0], &[0.5, 0.5]).is_err());
        assert!(cross_entropy(&[0.9, 0.3], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn init_loss_is_ln_classes() {
        for classes in [2usize, 4, 31] {
            let mut rng = Rng::new(11);
            let params = init_params(30, 8, 2, classes, false, &mut rng);
            let tokens = random_tokens(5, 8, 30, &mut rng);
            let (prediction, _, _) = forward(&tokens, 5, &params).unwrap();
            let loss = cross_entropy(&one_hot(classes - 1, classes), &prediction).unwrap();
            assert!(
                (loss - (classes as f64).ln()).abs() < 1e-9,
                "C={classes}: loss {loss} vs {}",
                (classes as f64).ln()
            );
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut a = Rng::new(12);
        let mut b = Rng::new(12);
        let pa = init_params(20, 8, 3, 4, false, &mut a);
        let pb = init_params(20, 8, 3, 4, false, &mut b);
        assert_eq!(pa, pb);
        let s = 1.0 / 8.0f64.sqrt();
        for &v in pa.embedding.values() {
            assert!(v > -s && v <= s);
        }
        for block in &pa.blocks {
            for &v in block.weight.values() {
                assert!(v > -s && v <= s);
            }
            assert!(block.bias.iter().all(|&v| v == 0.0));
        }
        assert!(pa.head.weight.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padding_never_changes_the_prediction() {
        let params = tiny_params(13, true);
        let mut rng = Rng::new(14);
        let core = random_tokens(4, 4, params.vocab_size(), &mut rng);
        let mut padded = core.clone();
        padded.extend([0, 0, 0, 0]);
        let (a, _, _) = forward(&core, 4, &params).unwrap();
        let (b, _, _) = forward(&padded, 4, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_ones_mask_matches_unmixed_backprop() {
        let params = tiny_params(15, false);
        let mut rng = Rng::new(16);
        let tok_i = random_tokens(5, 6, params.vocab_size(), &mut rng);
        let tok_j = random_tokens(3, 6, params.vocab_size(), &mut rng);
        let y = one_hot(2, 4);
        let layer = 2;
        let (h_i, trace_i) = forward_to(&tok_i, 5, layer, &params).unwrap();
        let (h_j, trace_j) = forward_to(&tok_j, 3, layer, &params).unwrap();
        let mask = MaskMatrix::all_ones(6, 8);
        let mixed = apply_mask(&h_i, &h_j, &mask).unwrap();
        let (_, tail) = forward_from(&mixed, layer, &params).unwrap();
        let plan = MixPlan {
            strategy: MixStrategy::Base,
            i: 0,
            j: 1,
            layer,
            lambda: 0.0,
            swap_count: 0,
            pool_count: 0,
            mask: Some(mask),
            label_weight: 1.0,
        };
        let mixed_grads = backward_mixed(&trace_i, &trace_j, &plan, &tail, &y, &params).unwrap();

        // Plain backprop on sample i, but pooled over the mixed span
        // max(len_i, len_j) = 5 to match the mixed pipeline.
        let plain_grads = backward(&trace_i, &tail, &y, &params).unwrap();
        assert_eq!(mixed_grads, plain_grads);
    }

    #[test]
    fn identical_traces_recover_unsplit_gradient() {
        let params = tiny_params(17, true);
        let mut rng = Rng::new(18);
        let tokens = random_tokens(6, 6, params.vocab_size(), &mut rng);
        let y = one_hot(1, 4);
        let layer = 1;
        let (h, trace) = forward_to(&tokens, 6, layer, &params).unwrap();
        let mask = random_mask(6, 8, 3, &mut rng).unwrap();
        let mixed = apply_mask(&h, &h, &mask).unwrap();
        let (_, tail) = forward_from(&mixed, layer, &params).unwrap();
        let plan = MixPlan {
            strategy: MixStrategy::Base,
            i: 0,
            j: 1,
            layer,
            lambda: 0.5,
            swap_count: 3,
            pool_count: 6,
            mask: Some(mask),
            label_weight: 0.5,
        };
        let split = backward_mixed(&trace, &trace, &plan, &tail, &y, &params).unwrap();
        let whole = backward(&trace, &tail, &y, &params).unwrap();
        let mut split_c = split.clone();
        let mut whole_c = whole.clone();
        for idx in 0..split_c.param_count() {
            let s = split_c.param(idx);
            let w = whole_c.param(idx);
            assert!(
                (s - w).abs() <= 1e-12 * s.abs().max(w.abs()).max(1.0),
                "param {idx}: split {s} vs whole {w}"
            );
        }
    }

    // The finite-difference sweep over random tiny configurations and every
    // strategy; the dedicated acceptance criterion re-runs this at the pinned
    // dimensions through the public grad-check entry point.
    #[test]
    fn analytic_gradients_match_finite_differences() {
        let eps = 1e-4;
        for case in 0u64..10 {
            let mut rng = Rng::new(900 + case);
            let residual = case % 2 == 0;
            let d = 4 + (case as usize % 3) * 2;
            let depth = 2 + case as usize % 2;
            let classes = 3 + case as usize % 2;
            let vocab = 12;
            let rows = 5;
            let mut params = init_params(vocab, d, depth, classes, residual, &mut rng);
            for idx in 0..params.param_count() {
                let jitter = params.param(idx) + 0.2 * (rng.next_f64() - 0.5);
                params.set_param(idx, jitter);
            }
            let len_i = 1 + rng.below(rows);
            let len_j = 1 + rng.below(rows);
            let tok_i = random_tokens(len_i, rows, vocab, &mut rng);
            let tok_j = random_tokens(len_j, rows, vocab, &mut rng);
            let layer = rng.below(depth + 1);
            let lambda = 0.3 + 0.4 * rng.next_f64();
            let p = swap_count(lambda, d);
            let q = pool_count(p, 2.0, d);
            let y = {
                let mut v = vec![0.0; classes];
                v[rng.below(classes)] = 0.7;
                v[0] += 0.3;
                v
            };

            for strategy in MixStrategy::ALL {
                let (h_i, trace_i) = forward_to(&tok_i, len_i, layer, &params).unwrap();
                let (h_j, trace_j) = forward_to(&tok_j, len_j, layer, &params).unwrap();
                let mask = match strategy {
                    MixStrategy::Base => Some(random_mask(rows, d, p, &mut rng).unwrap()),
                    MixStrategy::A => Some(
                        crate::augment::product_magnitude_mask(&h_i, &h_j, p, RowScope::PerRow)
                            .unwrap(),
                    ),
                    MixStrategy::B => Some(
                        crate::augment::two_stage_mask(&h_i, &h_j, p, q, false, RowScope::PerRow)
                            .unwrap(),
                    ),
                    _ => None,
                };
                let plan = MixPlan {
                    strategy,
                    i: 0,
                    j: 1,
                    layer,
                    lambda,
                    swap_count: p,
                    pool_count: q,
                    mask,
                    label_weight: 0.5,
                };
                let mixed = match strategy {
                    MixStrategy::None => h_i.clone(),
                    MixStrategy::Linear => linear_mix(&h_i, &h_j, lambda).unwrap(),
                    _ => apply_mask(&h_i, &h_j, plan.mask.as_ref().unwrap()).unwrap(),
                };
                let (_, tail) = forward_from(&mixed, layer, &params).unwrap();
                let analytic =
                    backward_mixed(&trace_i, &trace_j, &plan, &tail, &y, &params).unwrap();

                let loss = |p: &ModelParams| -> f64 {
                    let (hi, _) = forward_to(&tok_i, len_i, layer, p).unwrap();
                    let (hj, _) = forward_to(&tok_j, len_j, layer, p).unwrap();
                    let mixed = match strategy {
                        MixStrategy::None => hi,
                        MixStrategy::Linear => linear_mix(&hi, &hj, lambda).unwrap(),
                        _ => apply_mask(&hi, &hj, plan.mask.as_ref().unwrap()).unwrap(),
                    };
                    let (prediction, _) = forward_from(&mixed, layer, p).unwrap();
                    cross_entropy(&y, &prediction).unwrap()
                };
                let numeric = finite_difference(&params, loss, eps);
                let err = max_relative_error(&analytic, &numeric);
                assert!(
                    err <= 1e-4,
                    "case {case} strategy {strategy:?} layer {layer}: rel err {err}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let params = tiny_params(19, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(params, loaded);
        let mut p = params.clone();
        let mut l = loaded.clone();
        for idx in 0..p.param_count() {
            assert_eq!(p.param(idx).to_bits(), l.param(idx).to_bits());
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_params(&path), Err(ModelError::BadCheckpoint(_))));
        let params = tiny_params(20, false);
        save_params(&params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_params(&path), Err(ModelError::BadCheckpoint(_))));
    }

    #[test]
    fn backward_rejects_layer_mismatch() {
        let params = tiny_params(21, false);
        let mut rng = Rng::new(22);
        let tokens = random_tokens(4, 6, params.vocab_size(), &mut rng);
        let (state, trace) = forward_to(&tokens, 4, 1, &params).unwrap();
        let (_, tail) = forward_from(&state, 1, &params).unwrap();
        let plan = MixPlan {
            strategy: MixStrategy::Base,
            i: 0,
            j: 1,
            layer: 2,
            lambda: 0.5,
            swap_count: 0,
            pool_count: 0,
            mask: Some(MaskMatrix::all_ones(6, 8)),
            label_weight: 1.0,
        };
        let y = one_hot(0, 4);
        assert!(matches!(
            backward_mixed(&trace, &trace, &plan, &tail, &y, &params),
            Err(ModelError::TraceLayerMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn index_set_roundtrip_through_mask() {
        // Shared-zero masks built from an IndexSet report the same columns.
        let zeros = IndexSet::new(vec![1, 3], 8).unwrap();
        let mask = MaskMatrix::from_shared_zeros(2, 8, &zeros).unwrap();
        assert_eq!(mask.zero_columns(0), vec![1, 3]);
        assert_eq!(mask.zeros_per_row(), 2);
    }
}
