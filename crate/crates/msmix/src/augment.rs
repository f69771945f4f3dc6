//! Mix-plan construction and hidden-state mixing.
//!
//! One augmentation event pairs two samples, picks a layer `k` and a mixing
//! coefficient `lambda ~ Beta(alpha, alpha)`, and either swaps
//! `p = floor(lambda * d)` feature dimensions of one hidden state with the
//! partner's values or interpolates the two states linearly. Three swap
//! strategies choose the dimensions:
//!
//! - `base` — a uniformly random subset, the same columns in every row;
//! - `a`    — per row, the `p` dimensions with the largest `|h_i ⊙ h_j|`;
//! - `b`    — per row, restrict to the `q` dimensions where `|h_i|` is
//!            smallest, then take the `p` with the largest `|h_j|` inside
//!            that pool (`q >= p`).
//!
//! Labels are fused as `w·y_i + (1−w)·y_j`. In `consistent` mode `w` is the
//! fraction of dimensions actually retained from sample `i`, so a zero-swap
//! plan keeps both the state and the label of sample `i`; `lambda` mode uses
//! the raw coefficient, the original Mixup rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::HiddenState;
use crate::tensor::{bottom_indices, top_indices, IndexSet, Matrix, Rng, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer set is empty")]
    EmptyLayerSet,
    #[error("layer {layer} outside [0, {max}]")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("pair indices must differ, got ({0}, {0})")]
    SamePair(usize),
    #[error("hidden states differ in shape: {0}x{1} vs {2}x{3}")]
    HiddenShapeMismatch(usize, usize, usize, usize),
    #[error("mask shape {0}x{1} does not match hidden state {2}x{3}")]
    MaskShapeMismatch(usize, usize, usize, usize),
    #[error("mask entry at ({row}, {col}) is {value}, expected 0 or 1")]
    NonBinaryMask { row: usize, col: usize, value: f64 },
    #[error("mask rows carry unequal zero counts: {0} vs {1}")]
    UnevenZeroCount(usize, usize),
    #[error("swap count {swap} exceeds candidate pool {pool}")]
    SwapExceedsPool { swap: usize, pool: usize },
    #[error("mixing weight {0} outside [0, 1]")]
    InvalidLambda(f64),
    #[error("plan for strategy {0:?} carries no mask")]
    MissingMask(MixStrategy),
    #[error("label vectors differ in length: {0} vs {1}")]
    LabelLengthMismatch(usize, usize),
    #[error("label vector off the simplex: sum {sum}, min entry {min}")]
    OffSimplex { sum: f64, min: f64 },
    #[error("q_ratio must be at least 1, got {0}")]
    BadQRatio(f64),
    #[error("alpha must be positive, got {0}")]
    BadAlpha(f64),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which augmentation to run during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MixStrategy {
    /// No augmentation; samples are trained unpaired.
    #[default]
    None,
    /// Random dimension swap, one shared column subset per event.
    Base,
    /// Product-magnitude selection: largest `|h_i ⊙ h_j|` per row.
    A,
    /// Two-stage selection: smallest `|h_i|` pool, largest `|h_j|` within it.
    B,
    /// Linear interpolation of the two hidden states.
    Linear,
}

impl MixStrategy {
    pub fn is_swap(self) -> bool {
        matches!(self, MixStrategy::Base | MixStrategy::A | MixStrategy::B)
    }

    /// All strategies, in the order comparison reports list them.
    pub const ALL: [MixStrategy; 5] =
        [MixStrategy::None, MixStrategy::Linear, MixStrategy::Base, MixStrategy::A, MixStrategy::B];

    pub fn name(self) -> &'static str {
        match self {
            MixStrategy::None => "None",
            MixStrategy::Base => "MSMix-base",
            MixStrategy::A => "MSMix-A",
            MixStrategy::B => "MSMix-B",
            MixStrategy::Linear => "Linear",
        }
    }
}

/// How the label-fusion weight for sample `i` is chosen.
///
/// `Consistent` ties the weight to the fraction of dimensions kept from
/// sample `i` (`(d - p) / d` for swaps), so content and label always agree.
/// `Lambda` uses the drawn coefficient directly; for swaps the swapped
/// fraction is itself close to `lambda`, so the label then leans toward the
/// sample that contributed fewer dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    Consistent,
    /// Raw-coefficient weighting; accepted in config files and on the CLI as
    /// `lambda` or `paper`.
    #[serde(alias = "paper")]
    Lambda,
}

/// Whether strategies `a`/`b` score each row independently or pool scores
/// over token positions and share one column subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RowScope {
    #[default]
    PerRow,
    Shared,
}

/// All augmentation knobs. `layer_set` is filled with the middle layers of
/// the model when left empty in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    #[serde(default)]
    pub strategy: MixStrategy,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Layers eligible for mixing; each entry must lie in [0, m] where 0 is
    /// the embedding output.
    #[serde(default)]
    pub layer_set: Vec<usize>,
    /// Candidate-pool factor for strategy `b`: `q = min(d, ceil(q_ratio * p))`.
    #[serde(default = "default_q_ratio")]
    pub q_ratio: f64,
    #[serde(default)]
    pub label_mode: LabelMode,
    #[serde(default)]
    pub row_scope: RowScope,
    /// Strategy `b` only: rank the partner's dimensions by signed value
    /// instead of magnitude.
    #[serde(default)]
    pub signed_rank: bool,
}

fn default_alpha() -> f64 {
    0.5
}

fn default_q_ratio() -> f64 {
    2.0
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            strategy: MixStrategy::None,
            alpha: default_alpha(),
            layer_set: Vec::new(),
            q_ratio: default_q_ratio(),
            label_mode: LabelMode::Consistent,
            row_scope: RowScope::PerRow,
            signed_rank: false,
        }
    }
}

impl MixConfig {
    /// Checks the knobs against a model with `max_layer` blocks.
    pub fn validate(&self, max_layer: usize) -> Result<(), AugmentError> {
        if !(self.alpha > 0.0) {
            return Err(AugmentError::BadAlpha(self.alpha));
        }
        if self.q_ratio < 1.0 {
            return Err(AugmentError::BadQRatio(self.q_ratio));
        }
        if self.layer_set.is_empty() {
            return Err(AugmentError::EmptyLayerSet);
        }
        for &layer in &self.layer_set {
            if layer > max_layer {
                return Err(AugmentError::LayerOutOfRange { layer, max: max_layer });
            }
        }
        Ok(())
    }

    /// The middle-layer default: every hidden layer except the last, or the
    /// last itself when the model is too shallow to have a middle.
    pub fn middle_layers(depth: usize) -> Vec<usize> {
        if depth >= 2 {
            (1..depth).collect()
        } else {
            vec![depth]
        }
    }
}

// ---------------------------------------------------------------------------
// MaskMatrix
// ---------------------------------------------------------------------------

/// Binary I×d selection mask. An entry of 1 keeps the value from sample `i`;
/// a 0 takes the partner's value. Every row carries exactly the same number
/// of zeros, so the swap size is well defined for the whole state.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    zeros_per_row: usize,
    keep: Vec<bool>,
}

impl MaskMatrix {
    pub fn all_ones(rows: usize, cols: usize) -> Self {
        MaskMatrix { rows, cols, zeros_per_row: 0, keep: vec![true; rows * cols] }
    }

    /// Same zero columns in every row.
    pub fn from_shared_zeros(
        rows: usize,
        cols: usize,
        zeros: &IndexSet,
    ) -> Result<Self, AugmentError> {
        if zeros.len() > cols {
            return Err(TensorError::CountExceedsDim { count: zeros.len(), dim: cols }.into());
        }
        let mut keep = vec![true; rows * cols];
        for r in 0..rows {
            for c in zeros.iter() {
                if c >= cols {
                    return Err(TensorError::CountExceedsDim { count: c, dim: cols }.into());
                }
                keep[r * cols + c] = false;
            }
        }
        Ok(MaskMatrix { rows, cols, zeros_per_row: zeros.len(), keep })
    }

    /// One zero set per row; all rows must agree on the count.
    pub fn from_row_zeros(cols: usize, row_zeros: &[IndexSet]) -> Result<Self, AugmentError> {
        let rows = row_zeros.len();
        let zeros_per_row = row_zeros.first().map_or(0, IndexSet::len);
        let mut keep = vec![true; rows * cols];
        for (r, zeros) in row_zeros.iter().enumerate() {
            if zeros.len() != zeros_per_row {
                return Err(AugmentError::UnevenZeroCount(zeros_per_row, zeros.len()));
            }
            for c in zeros.iter() {
                if c >= cols {
                    return Err(TensorError::CountExceedsDim { count: c, dim: cols }.into());
                }
                keep[r * cols + c] = false;
            }
        }
        Ok(MaskMatrix { rows, cols, zeros_per_row, keep })
    }

    /// Validates a dense matrix as a mask; anything but exact 0.0/1.0 entries
    /// is rejected.
    pub fn from_matrix(m: &Matrix) -> Result<Self, AugmentError> {
        let mut keep = Vec::with_capacity(m.rows() * m.cols());
        for row in 0..m.rows() {
            for col in 0..m.cols() {
                match m.get(row, col) {
                    v if v == 1.0 => keep.push(true),
                    v if v == 0.0 => keep.push(false),
                    value => return Err(AugmentError::NonBinaryMask { row, col, value }),
                }
            }
        }
        let mut zeros_per_row = None;
        for row in 0..m.rows() {
            let count =
                keep[row * m.cols()..(row + 1) * m.cols()].iter().filter(|k| !**k).count();
            match zeros_per_row {
                None => zeros_per_row = Some(count),
                Some(expected) if expected != count => {
                    return Err(AugmentError::UnevenZeroCount(expected, count))
                }
                _ => {}
            }
        }
        Ok(MaskMatrix {
            rows: m.rows(),
            cols: m.cols(),
            zeros_per_row: zeros_per_row.unwrap_or(0),
            keep,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn zeros_per_row(&self) -> usize {
        self.zeros_per_row
    }

    /// True where the mask is 1 (value kept from sample `i`).
    pub fn keeps(&self, row: usize, col: usize) -> bool {
        self.keep[row * self.cols + col]
    }

    /// Zero columns of one row, ascending.
    pub fn zero_columns(&self, row: usize) -> Vec<usize> {
        (0..self.cols).filter(|&c| !self.keeps(row, c)).collect()
    }

    pub fn to_matrix(&self) -> Matrix {
        let values = self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Matrix::new(self.rows, self.cols, values).expect("mask entries are finite")
    }
}

// ---------------------------------------------------------------------------
// MixPlan
// ---------------------------------------------------------------------------

/// One augmentation event, fully describing how a pair is mixed.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    pub strategy: MixStrategy,
    /// Dataset indices of the pair; always distinct.
    pub i: usize,
    pub j: usize,
    /// Layer at which mixing happens (0 = embedding output).
    pub layer: usize,
    pub lambda: f64,
    /// Number of swapped dimensions, `floor(lambda * d)`.
    pub swap_count: usize,
    /// Candidate-pool size for strategy `b`, `min(d, ceil(q_ratio * p))`.
    pub pool_count: usize,
    /// Filled at draw time for `base`, after the forward pass for `a`/`b`,
    /// absent for `none`/`linear`.
    pub mask: Option<MaskMatrix>,
    /// Label-fusion weight for sample `i`.
    pub label_weight: f64,
}

/// `p = floor(lambda * d)`.
pub fn swap_count(lambda: f64, d: usize) -> usize {
    (lambda * d as f64).floor() as usize
}

/// `q = min(d, ceil(q_ratio * p))`.
pub fn pool_count(swap: usize, q_ratio: f64, d: usize) -> usize {
    ((q_ratio * swap as f64).ceil() as usize).min(d)
}

/// Samples one augmentation event for the pair `(i, j)`: the coefficient from
/// Beta(alpha, alpha), the layer uniformly from the configured set, and for
/// the `base` strategy the shared column subset. Strategies `a`/`b` leave the
/// mask unfilled because it depends on the hidden states.
pub fn draw_plan(
    config: &MixConfig,
    d: usize,
    rows: usize,
    pair: (usize, usize),
    rng: &mut Rng,
) -> Result<MixPlan, AugmentError> {
    let (i, j) = pair;
    if i == j {
        return Err(AugmentError::SamePair(i));
    }
    if config.layer_set.is_empty() {
        return Err(AugmentError::EmptyLayerSet);
    }
    if config.strategy == MixStrategy::None {
        return Ok(MixPlan {
            strategy: MixStrategy::None,
            i,
            j,
            layer: config.layer_set[0],
            lambda: 1.0,
            swap_count: 0,
            pool_count: 0,
            mask: None,
            label_weight: 1.0,
        });
    }
    if !(config.alpha > 0.0) {
        return Err(AugmentError::BadAlpha(config.alpha));
    }
    let lambda = crate::tensor::sample_beta(config.alpha, rng)?;
    let layer = config.layer_set[rng.below(config.layer_set.len())];
    let p = swap_count(lambda, d);
    let q = pool_count(p, config.q_ratio, d);
    let label_weight = match (config.strategy, config.label_mode) {
        (MixStrategy::Linear, _) => lambda,
        (_, LabelMode::Lambda) => lambda,
        (_, LabelMode::Consistent) => (d - p) as f64 / d as f64,
    };
    let mask = match config.strategy {
        MixStrategy::Base => Some(random_mask(rows, d, p, rng)?),
        _ => None,
    };
    Ok(MixPlan {
        strategy: config.strategy,
        i,
        j,
        layer,
        lambda,
        swap_count: p,
        pool_count: q,
        mask,
        label_weight,
    })
}

// ---------------------------------------------------------------------------
// Mask construction
// ---------------------------------------------------------------------------

/// `base`: one uniformly drawn column subset of size `zero_count`, shared by
/// all rows, marked as zeros.
pub fn random_mask(
    rows: usize,
    cols: usize,
    zero_count: usize,
    rng: &mut Rng,
) -> Result<MaskMatrix, AugmentError> {
    let zeros = rng.sample_indices(cols, zero_count)?;
    MaskMatrix::from_shared_zeros(rows, cols, &zeros)
}

fn check_same_shape(h_i: &HiddenState, h_j: &HiddenState) -> Result<(), AugmentError> {
    let (a, b) = (&h_i.values, &h_j.values);
    if !a.same_shape(b) {
        return Err(AugmentError::HiddenShapeMismatch(a.rows(), a.cols(), b.rows(), b.cols()));
    }
    Ok(())
}

/// Rows both states actually cover with content; shared-scope scoring pools
/// over these only, so one sample's padding junk cannot steer the selection.
fn content_rows(h_i: &HiddenState, h_j: &HiddenState) -> usize {
    h_i.effective_len.min(h_j.effective_len).max(1)
}

/// `a`: zero out, per row, the `zero_count` dimensions with the largest
/// `|h_i ⊙ h_j|`. With [`RowScope::Shared`] the per-row scores are averaged
/// over the rows both samples cover and one subset is applied everywhere.
pub fn product_magnitude_mask(
    h_i: &HiddenState,
    h_j: &HiddenState,
    zero_count: usize,
    scope: RowScope,
) -> Result<MaskMatrix, AugmentError> {
    check_same_shape(h_i, h_j)?;
    let (rows, cols) = (h_i.values.rows(), h_i.values.cols());
    let score = |r: usize, c: usize| (h_i.values.get(r, c) * h_j.values.get(r, c)).abs();
    match scope {
        RowScope::PerRow => {
            let mut row_zeros = Vec::with_capacity(rows);
            let mut scores = vec![0.0; cols];
            for r in 0..rows {
                for (c, slot) in scores.iter_mut().enumerate() {
                    *slot = score(r, c);
                }
                row_zeros.push(top_indices(&scores, zero_count)?);
            }
            MaskMatrix::from_row_zeros(cols, &row_zeros)
        }
        RowScope::Shared => {
            let span = content_rows(h_i, h_j);
            let mut scores = vec![0.0; cols];
            for r in 0..span {
                for (c, slot) in scores.iter_mut().enumerate() {
                    *slot += score(r, c);
                }
            }
            for slot in &mut scores {
                *slot /= span as f64;
            }
            let zeros = top_indices(&scores, zero_count)?;
            MaskMatrix::from_shared_zeros(rows, cols, &zeros)
        }
    }
}

/// Picks `zero_count` columns out of a candidate pool: pool members are
/// ranked by `partner_score` descending with ties to the lowest index;
/// columns outside the pool can never win.
fn select_within_pool(
    pool: &IndexSet,
    partner_score: impl Fn(usize) -> f64,
    zero_count: usize,
    cols: usize,
) -> Result<IndexSet, AugmentError> {
    if zero_count > pool.len() {
        return Err(AugmentError::SwapExceedsPool { swap: zero_count, pool: pool.len() });
    }
    let masked: Vec<f64> = (0..cols)
        .map(|c| if pool.contains(c) { partner_score(c) } else { f64::NEG_INFINITY })
        .collect();
    Ok(top_indices(&masked, zero_count)?)
}

/// `b`: per row, restrict to the `pool_count` dimensions where `|h_i|` is
/// smallest, then zero the `zero_count` of those where the partner scores
/// highest — `|h_j|` by default, the signed value with `signed_rank`.
pub fn two_stage_mask(
    h_i: &HiddenState,
    h_j: &HiddenState,
    zero_count: usize,
    pool_count: usize,
    signed_rank: bool,
    scope: RowScope,
) -> Result<MaskMatrix, AugmentError> {
    check_same_shape(h_i, h_j)?;
    let (rows, cols) = (h_i.values.rows(), h_i.values.cols());
    if zero_count > pool_count {
        return Err(AugmentError::SwapExceedsPool { swap: zero_count, pool: pool_count });
    }
    let rank = |v: f64| if signed_rank { v } else { v.abs() };
    match scope {
        RowScope::PerRow => {
            let mut row_zeros = Vec::with_capacity(rows);
            let mut own = vec![0.0; cols];
            for r in 0..rows {
                for (c, slot) in own.iter_mut().enumerate() {
                    *slot = h_i.values.get(r, c).abs();
                }
                let pool = bottom_indices(&own, pool_count)?;
                row_zeros.push(select_within_pool(
                    &pool,
                    |c| rank(h_j.values.get(r, c)),
                    zero_count,
                    cols,
                )?);
            }
            MaskMatrix::from_row_zeros(cols, &row_zeros)
        }
        RowScope::Shared => {
            let span = content_rows(h_i, h_j);
            let mut own = vec![0.0; cols];
            let mut partner = vec![0.0; cols];
            for r in 0..span {
                for c in 0..cols {
                    own[c] += h_i.values.get(r, c).abs();
                    partner[c] += rank(h_j.values.get(r, c));
                }
            }
            for c in 0..cols {
                own[c] /= span as f64;
                partner[c] /= span as f64;
            }
            let pool = bottom_indices(&own, pool_count)?;
            let zeros = select_within_pool(&pool, |c| partner[c], zero_count, cols)?;
            MaskMatrix::from_shared_zeros(rows, cols, &zeros)
        }
    }
}

// ---------------------------------------------------------------------------
// Mixing
// ---------------------------------------------------------------------------

/// `h_mix = M ⊙ h_i + (1 − M) ⊙ h_j`, realized as an exact per-entry select
/// so the boundary masks reproduce the inputs bit for bit. The mixed state
/// covers `max(len_i, len_j)` rows so neither sentence is truncated.
pub fn apply_mask(
    h_i: &HiddenState,
    h_j: &HiddenState,
    mask: &MaskMatrix,
) -> Result<HiddenState, AugmentError> {
    check_same_shape(h_i, h_j)?;
    let (rows, cols) = (h_i.values.rows(), h_i.values.cols());
    if mask.rows() != rows || mask.cols() != cols {
        return Err(AugmentError::MaskShapeMismatch(mask.rows(), mask.cols(), rows, cols));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            values
                .push(if mask.keeps(r, c) { h_i.values.get(r, c) } else { h_j.values.get(r, c) });
        }
    }
    let matrix = Matrix::new(rows, cols, values)?;
    Ok(HiddenState::raw(matrix, h_i.effective_len.max(h_j.effective_len)))
}

/// `lambda * h_i + (1 - lambda) * h_j` entry-wise. The endpoints short-circuit
/// to exact copies.
pub fn linear_mix(
    h_i: &HiddenState,
    h_j: &HiddenState,
    lambda: f64,
) -> Result<HiddenState, AugmentError> {
    check_same_shape(h_i, h_j)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AugmentError::InvalidLambda(lambda));
    }
    let effective = h_i.effective_len.max(h_j.effective_len);
    let matrix = if lambda == 1.0 {
        h_i.values.clone()
    } else if lambda == 0.0 {
        h_j.values.clone()
    } else {
        let values = h_i
            .values
            .values()
            .iter()
            .zip(h_j.values.values())
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        Matrix::new(h_i.values.rows(), h_i.values.cols(), values)?
    };
    Ok(HiddenState::raw(matrix, effective))
}

/// Runs the plan's strategy on a forwarded pair. For `a`/`b` the mask is
/// computed here and stored back into the plan so the backward pass can reuse
/// it.
pub fn mix_hidden(
    h_i: &HiddenState,
    h_j: &HiddenState,
    plan: &mut MixPlan,
    config: &MixConfig,
) -> Result<HiddenState, AugmentError> {
    match plan.strategy {
        MixStrategy::None => Ok(h_i.clone()),
        MixStrategy::Linear => linear_mix(h_i, h_j, plan.lambda),
        MixStrategy::Base => {
            let mask = plan.mask.as_ref().ok_or(AugmentError::MissingMask(plan.strategy))?;
            apply_mask(h_i, h_j, mask)
        }
        MixStrategy::A => {
            let mask = product_magnitude_mask(h_i, h_j, plan.swap_count, config.row_scope)?;
            let mixed = apply_mask(h_i, h_j, &mask)?;
            plan.mask = Some(mask);
            Ok(mixed)
        }
        MixStrategy::B => {
            let mask = two_stage_mask(
                h_i,
                h_j,
                plan.swap_count,
                plan.pool_count,
                config.signed_rank,
                config.row_scope,
            )?;
            let mixed = apply_mask(h_i, h_j, &mask)?;
            plan.mask = Some(mask);
            Ok(mixed)
        }
    }
}

/// `w·y_i + (1−w)·y_j` with `w` from the plan. Inputs must sit on the
/// probability simplex to within 1e-9.
pub fn mix_labels(y_i: &[f64], y_j: &[f64], plan: &MixPlan) -> Result<Vec<f64>, AugmentError> {
    if y_i.len() != y_j.len() {
        return Err(AugmentError::LabelLengthMismatch(y_i.len(), y_j.len()));
    }
    check_simplex(y_i)?;
    check_simplex(y_j)?;
    let w = plan.label_weight;
    Ok(y_i.iter().zip(y_j).map(|(a, b)| w * a + (1.0 - w) * b).collect())
}

fn check_simplex(y: &[f64]) -> Result<(), AugmentError> {
    let sum: f64 = y.iter().sum();
    let min = y.iter().copied().fold(f64::INFINITY, f64::min);
    // Negated forms so NaN fails the check too.
    if !((sum - 1.0).abs() <= 1e-9) || !(min >= -1e-9) {
        return Err(AugmentError::OffSimplex { sum, min });
    }
    Ok(())
}

/// Partner assignment for a batch: a seeded permutation of `0..n` with no
/// fixed points, reshuffled until none remain, so every sample mixes with a
/// different one.
pub fn pair_partners(n: usize, rng: &mut Rng) -> Vec<usize> {
    assert!(n >= 2, "pairing needs at least two samples");
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        rng.shuffle(&mut perm);
        if perm.iter().enumerate().all(|(slot, &partner)| slot != partner) {
            return perm;
        }
    }
}
