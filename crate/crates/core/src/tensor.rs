//! Dense rank-1/rank-2 `f32` tensors and the handful of kernels the models need.
//!
//! Every reduction here accumulates in `f32` in a fixed left-to-right order so
//! that an injected run is bit-reproducible from its seed.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index {index} out of range for {rows} rows")]
    Index { index: usize, rows: usize },
}

/// Row-major dense tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(TensorError::Dimension(format!(
                "rank must be 1 or 2, got {}",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Dimension(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zeros: invalid rank")
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Dimension("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        if self.rank() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    /// Raw IEEE-754 word of element `i`.
    pub fn word(&self, i: usize) -> u32 {
        self.data[i].to_bits()
    }

    pub fn set_word(&mut self, i: usize, word: u32) {
        self.data[i] = f32::from_bits(word);
    }

    /// Toggles bit `bit` (0 = LSB of the mantissa, 31 = sign) of element `i`.
    pub fn toggle_bit(&mut self, i: usize, bit: u32) {
        debug_assert!(bit < 32);
        let w = self.word(i) ^ (1u32 << bit);
        self.set_word(i, w);
    }

    pub fn words(&self) -> impl Iterator<Item = u32> + '_ {
        self.data.iter().map(|v| v.to_bits())
    }

    /// Bitwise equality of the element words, so `NaN` payloads compare too.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.words().eq(other.words())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(shape, self.data)
    }
}

impl Default for Tensor {
    fn default() -> Self {
        Tensor::vector(Vec::new())
    }
}

/// `C = A × B` with `c[i][j]` accumulated over `l` in ascending order.
pub fn gemm(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(TensorError::Dimension("gemm needs rank-2 operands".into()));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(TensorError::Dimension(format!(
            "inner dimensions differ: {m}x{k} by {k2}x{n}"
        )));
    }
    let mut c = vec![0.0f32; m * n];
    // i-l-j loop order keeps the per-element accumulation order of the naive
    // triple loop while streaming rows of B.
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b.data[l * n..(l + 1) * n];
            for (c_ij, &b_lj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_il * b_lj;
            }
        }
    }
    Tensor::matrix(m, n, c)
}

/// Adds `bias` to every row of `x` in place.
pub fn add_row_bias(x: &mut Tensor, bias: &Tensor) -> Result<(), TensorError> {
    let n = x.cols();
    if bias.len() != n {
        return Err(TensorError::Dimension(format!(
            "bias of length {} for {} columns",
            bias.len(),
            n
        )));
    }
    for row in x.data.chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += *b;
        }
    }
    Ok(())
}

/// Sum of the selected rows of `table`, accumulated in index order.
pub fn embedding_bag(table: &Tensor, indices: &[usize]) -> Result<Tensor, TensorError> {
    let mut out = vec![0.0f32; table.cols()];
    embedding_bag_into(table, indices, &mut out)?;
    Ok(Tensor::vector(out))
}

pub(crate) fn embedding_bag_into(
    table: &Tensor,
    indices: &[usize],
    out: &mut [f32],
) -> Result<(), TensorError> {
    if table.rank() != 2 {
        return Err(TensorError::Dimension("embedding table must be rank 2".into()));
    }
    let rows = table.shape[0];
    let d = table.cols();
    debug_assert_eq!(out.len(), d);
    out.fill(0.0);
    for &f in indices {
        if f >= rows {
            return Err(TensorError::Index { index: f, rows });
        }
        for (o, t) in out.iter_mut().zip(table.row(f)) {
            *o += *t;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Clipped ReLU; see [`crate::mitigate::clip_activation`].
    Clipped(crate::mitigate::ClipSpec),
}

impl Activation {
    #[inline]
    pub fn apply_scalar(self, x: f32) -> f32 {
        match self {
            Activation::Relu => relu(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Clipped(spec) => spec.apply(x),
        }
    }
}

/// `max(0, x)` that lets NaN through.
#[inline]
pub fn relu(x: f32) -> f32 {
    if x.is_nan() || x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn apply_activation(x: &Tensor, kind: Activation) -> Tensor {
    let mut out = x.clone();
    apply_activation_in_place(&mut out, kind);
    out
}

pub fn apply_activation_in_place(x: &mut Tensor, kind: Activation) {
    for v in x.data.iter_mut() {
        *v = kind.apply_scalar(*v);
    }
}

/// Second-order factorization-machine term `Σ_{i<j} <v_i, v_j>`, computed as
/// `½(‖Σv‖² − Σ‖v‖²)` with `f64` accumulators.
pub fn fm_interaction(embeddings: &[&[f32]]) -> Result<f32, TensorError> {
    let Some(first) = embeddings.first() else {
        return Ok(0.0);
    };
    let d = first.len();
    if embeddings.iter().any(|v| v.len() != d) {
        return Err(TensorError::Dimension(
            "fm_interaction vectors differ in length".into(),
        ));
    }
    let mut sum = vec![0.0f64; d];
    let mut sum_sq = 0.0f64;
    for v in embeddings {
        for (s, &x) in sum.iter_mut().zip(v.iter()) {
            let x = x as f64;
            *s += x;
            sum_sq += x * x;
        }
    }
    let sq_sum: f64 = sum.iter().map(|s| s * s).sum();
    Ok((0.5 * (sq_sum - sum_sq)) as f32)
}
