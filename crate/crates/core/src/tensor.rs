//! Dense f32 kernels for the toy encoder.
//!
//! Every reduction accumulates sequentially over the inner dimension, so a
//! given input always produces the same bits regardless of thread count.
//! Matrix products optionally report their multiply-accumulate count to a
//! [`MacCounter`], which is the ground truth the analytical cost model is
//! checked against.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

const LN_EPS: f32 = 1e-5;
// Below this many MACs the rayon split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Invalid(format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Writes row `k` of `src` into row `indices[k]` of `self`.
    pub fn scatter_rows(&mut self, indices: &[usize], src: &Matrix) {
        debug_assert_eq!(indices.len(), src.rows);
        for (k, &i) in indices.iter().enumerate() {
            self.row_mut(i).copy_from_slice(src.row(k));
        }
    }

    /// Columns `[start, start + width)`.
    pub fn column_block(&self, start: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Self {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Writes `src` into columns `[start, start + src.cols)`.
    pub fn set_column_block(&mut self, start: usize, src: &Matrix) {
        for r in 0..self.rows {
            self.row_mut(r)[start..start + src.cols].copy_from_slice(src.row(r));
        }
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row_vector(&mut self, v: &[f32]) -> Result<()> {
        if v.len() != self.cols {
            return Err(TensorError::DimensionMismatch {
                op: "add_row_vector",
                left: self.shape(),
                right: (1, v.len()),
            });
        }
        for r in 0..self.rows {
            for (x, b) in self.row_mut(r).iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::DimensionMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }
}

/// Running multiply-accumulate total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounter(u64);

impl MacCounter {
    pub fn new() -> Self {
        Self(0)
    }

    pub fn add(&mut self, macs: u64) {
        self.0 += macs;
    }

    pub fn total(&self) -> u64 {
        self.0
    }

    /// FLOPs counted as two per multiply-accumulate.
    pub fn flops(&self) -> u64 {
        2 * self.0
    }
}

fn record(counter: Option<&mut MacCounter>, macs: usize) {
    if let Some(c) = counter {
        c.add(macs as u64);
    }
}

/// `a * b`, accumulating sequentially over the shared dimension.
pub fn matmul(a: &Matrix, b: &Matrix, counter: Option<&mut MacCounter>) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(TensorError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    let kernel = |(i, out_row): (usize, &mut [f32])| {
        let a_row = a.row(i);
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    };
    if n > 0 {
        if m * k * n >= PAR_THRESHOLD {
            out.data.par_chunks_mut(n).enumerate().for_each(kernel);
        } else {
            out.data.chunks_mut(n).enumerate().for_each(kernel);
        }
    }
    record(counter, m * k * n);
    Ok(out)
}

/// `a * b^T`, accumulating sequentially over the shared dimension.
pub fn matmul_transposed(
    a: &Matrix,
    b: &Matrix,
    counter: Option<&mut MacCounter>,
) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(TensorError::DimensionMismatch {
            op: "matmul_transposed",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(m, n);
    let kernel = |(i, out_row): (usize, &mut [f32])| {
        let a_row = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (x, y) in a_row.iter().zip(b.row(j)) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if n > 0 {
        if m * k * n >= PAR_THRESHOLD {
            out.data.par_chunks_mut(n).enumerate().for_each(kernel);
        } else {
            out.data.chunks_mut(n).enumerate().for_each(kernel);
        }
    }
    record(counter, m * k * n);
    Ok(out)
}

/// Row-wise softmax with max subtraction. Entries equal to `-inf` get
/// probability exactly zero as long as the row has a finite entry.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    softmax_rows_inplace(&mut out);
    out
}

pub fn softmax_rows_inplace(m: &mut Matrix) {
    let cols = m.cols;
    if cols == 0 {
        return;
    }
    for row in m.data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Per-row normalization to zero mean and unit variance (epsilon 1e-5),
/// followed by the affine `gain * x + bias`.
pub fn layer_norm(m: &Matrix, gain: &[f32], bias: &[f32]) -> Result<Matrix> {
    if m.cols < 2 || gain.len() != m.cols || bias.len() != m.cols {
        return Err(TensorError::DimensionMismatch {
            op: "layer_norm",
            left: m.shape(),
            right: (gain.len(), bias.len()),
        });
    }
    let n = m.cols as f32;
    let mut out = m.clone();
    for row in out.data.chunks_mut(m.cols) {
        let mut sum = 0.0f32;
        for &x in row.iter() {
            sum += x;
        }
        let mean = sum / n;
        let mut sq = 0.0f32;
        for &x in row.iter() {
            let d = x - mean;
            sq += d * d;
        }
        let inv = 1.0 / (sq / n + LN_EPS).sqrt();
        for ((x, g), b) in row.iter_mut().zip(gain).zip(bias) {
            *x = (*x - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}
