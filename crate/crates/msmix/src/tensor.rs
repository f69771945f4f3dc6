//! Dense numeric kernels and deterministic random sampling.
//!
//! Everything here is double precision and allocation-simple: a [`Matrix`] is
//! a row-major `Vec<f64>`, an [`IndexSet`] is a sorted list of column indices,
//! and [`Rng`] is xoshiro256++ seeded through splitmix64 so that equal seeds
//! produce bitwise-equal streams everywhere. No BLAS, no GPU, no autodiff.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite value {value} at position {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("selection count {count} exceeds dimension {dim}")]
    CountExceedsDim { count: usize, dim: usize },
    #[error("beta shape parameter must be positive, got {0}")]
    BadAlpha(f64),
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major f64 matrix. All stored entries are finite; constructors
/// reject NaN and infinity so downstream kernels never have to re-check.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        if values.len() != rows * cols {
            return Err(TensorError::BadLength { rows, cols, len: values.len() });
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite { index: i, value: v });
            }
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, values: vec![0.0; rows * cols] }
    }

    /// Builds from nested rows; handy in tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::BadLength { rows: r, cols: c, len: row.len() });
            }
            values.extend_from_slice(row);
        }
        Matrix::new(r, c, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for in-place arithmetic. Callers keep entries finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `self += other`, entry-wise. Panics on shape mismatch.
    pub fn add_assign(&mut self, other: &Matrix) {
        assert!(self.same_shape(other), "add_assign shape mismatch");
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += y;
        }
    }

    /// `self *= factor`, entry-wise.
    pub fn scale(&mut self, factor: f64) {
        for x in &mut self.values {
            *x *= factor;
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.values[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.values[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn shape_error(&self, other: &Matrix, op: &'static str) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left_rows: self.rows,
            left_cols: self.cols,
            right_rows: other.rows,
            right_cols: other.cols,
        }
    }
}

/// Element-wise product. Rejects mismatched shapes with a full shape report.
pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if !a.same_shape(b) {
        return Err(a.shape_error(b, "hadamard"));
    }
    let values = a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect();
    Ok(Matrix { rows: a.rows, cols: a.cols, values })
}

/// Numerically stable softmax: subtracts the max before exponentiating, so
/// inputs like `[1000, 0]` do not overflow.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>, TensorError> {
    if v.is_empty() {
        return Err(TensorError::EmptyInput("softmax"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// IndexSet
// ---------------------------------------------------------------------------

/// Strictly increasing set of column indices, the result of a top/bottom
/// selection over a length-`d` score vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    indices: Vec<usize>,
}

impl IndexSet {
    /// `indices` must be strictly increasing and below `dim`.
    pub fn new(indices: Vec<usize>, dim: usize) -> Result<Self, TensorError> {
        for pair in indices.windows(2) {
            if pair[1] <= pair[0] {
                return Err(TensorError::EmptyInput("IndexSet: indices not strictly increasing"));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= dim {
                return Err(TensorError::CountExceedsDim { count: last, dim });
            }
        }
        Ok(IndexSet { indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }
}

fn ranked_indices(values: &[f64], count: usize, largest: bool) -> Result<IndexSet, TensorError> {
    let d = values.len();
    if count > d {
        return Err(TensorError::CountExceedsDim { count, dim: d });
    }
    let mut order: Vec<usize> = (0..d).collect();
    // Ties break toward the lowest index so selection is deterministic and
    // permutation tests stay meaningful.
    order.sort_unstable_by(|&a, &b| {
        let cmp = if largest {
            values[b].total_cmp(&values[a])
        } else {
            values[a].total_cmp(&values[b])
        };
        cmp.then(a.cmp(&b))
    });
    let mut selected = order[..count].to_vec();
    selected.sort_unstable();
    IndexSet::new(selected, d)
}

/// Indices of the `count` largest values; ties go to the lowest index.
pub fn top_indices(values: &[f64], count: usize) -> Result<IndexSet, TensorError> {
    ranked_indices(values, count, true)
}

/// Indices of the `count` smallest values; ties go to the lowest index.
pub fn bottom_indices(values: &[f64], count: usize) -> Result<IndexSet, TensorError> {
    ranked_indices(values, count, false)
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

/// Deterministic generator: xoshiro256++ state initialized through splitmix64.
///
/// Single-owner by design. Parallel work must not share one instance; spawn
/// per-stream children with [`Rng::child`], which derives `seed ^ stream_id`.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut z = seed;
        let mut state = [0u64; 4];
        for slot in &mut state {
            // splitmix64
            z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut s = z;
            s = (s ^ (s >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            s = (s ^ (s >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            *slot = s ^ (s >> 31);
        }
        Rng { seed, state }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream for parallel work: seed derivation is
    /// `parent_seed ^ stream_id`. Callers pick distinct nonzero ids.
    pub fn child(&self, stream_id: u64) -> Rng {
        Rng::new(self.seed ^ stream_id)
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform integer in [0, bound). Rejection-sampled so every value is
    /// exactly equally likely.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below(0) is undefined");
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `count` distinct values from [0, dim), uniformly without replacement,
    /// returned in increasing order.
    pub fn sample_indices(&mut self, dim: usize, count: usize) -> Result<IndexSet, TensorError> {
        if count > dim {
            return Err(TensorError::CountExceedsDim { count, dim });
        }
        // Partial Fisher–Yates over the index range.
        let mut pool: Vec<usize> = (0..dim).collect();
        for i in 0..count {
            let j = i + self.below(dim - i);
            pool.swap(i, j);
        }
        let mut selected = pool[..count].to_vec();
        selected.sort_unstable();
        IndexSet::new(selected, dim)
    }

    /// Standard normal via the polar Box–Muller method.
    pub fn next_normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Gamma(shape, 1) by Marsaglia–Tsang. Shapes below one use the boost
    /// Gamma(a) = Gamma(a + 1) * U^(1/a).
    fn next_gamma(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let boost = loop {
                let u = self.next_f64();
                if u > 0.0 {
                    break u.powf(1.0 / shape);
                }
            };
            return boost * self.next_gamma(shape + 1.0);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (3.0 * d.sqrt());
        loop {
            let x = self.next_normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.next_f64();
            if u < 1.0 - 0.0331 * x * x * x * x {
                return d * v;
            }
            if u > 0.0 && u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }
}

/// One draw from Beta(alpha, alpha) via two Gamma(alpha, 1) draws
/// `g1 / (g1 + g2)`. Always lands in [0, 1].
pub fn sample_beta(alpha: f64, rng: &mut Rng) -> Result<f64, TensorError> {
    if !(alpha > 0.0) {
        return Err(TensorError::BadAlpha(alpha));
    }
    loop {
        let g1 = rng.next_gamma(alpha);
        let g2 = rng.next_gamma(alpha);
        // Tiny shapes can underflow both draws to zero; redraw instead of
        // emitting NaN.
        if g1 + g2 > 0.0 {
            return Ok(g1 / (g1 + g2));
        }
    }
}
