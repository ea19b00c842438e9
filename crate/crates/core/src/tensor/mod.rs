// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f32` tensors and the handful of kernels the model and
//! the attribution code need.
//!
//! Storage is `f32`; every reduction (matmul inner products, norm
//! statistics, softmax normalizers) accumulates in `f64`.

mod gemm;
mod svd;

pub use svd::{thin_svd, SvdResult, SVD_MAX_SWEEPS, SVD_TOLERANCE};

use crate::error::{Error, Result};

/// Epsilon added under the square root of both normalization layers.
pub const DEFAULT_NORM_EPS: f64 = 1e-5;

/// A dense row-major tensor of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` matches the data length.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    /// `n x n` identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Number of rows of a matrix (leading extent for higher ranks).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Length of the trailing axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` viewed as a slice over the trailing axis.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Element `(i, j)` of a matrix.
    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    /// Copies the columns `start..end` of a matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start > end || end > c {
            return Err(Error::Dimension(format!(
                "column block {start}..{end} outside {c} columns"
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Self::new(vec![r, w], out)
    }

    /// Copies the rows `start..end` of a matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start > end || end > r {
            return Err(Error::Dimension(format!(
                "row block {start}..{end} outside {r} rows"
            )));
        }
        Self::new(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// Extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!(
                "expected a matrix, got shape {s:?}"
            ))),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "cannot add {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

/// Matrix product `a (d1 x d2) * b (d2 x d3)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {m}x{k} * {k2}x{n}"
        )));
    }
    let out = gemm::gemm(a.data(), b.data(), m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Row vector times matrix, accumulated and returned in `f64`.
///
/// `w` is a row-major `rows x cols` block; only its first `x.len()` rows
/// are used.
pub fn vec_mat_f64(x: &[f64], w: &[f32], cols: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; cols];
    for (p, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = &w[p * cols..(p + 1) * cols];
        for (a, &b) in acc.iter_mut().zip(row) {
            *a += xv * f64::from(b);
        }
    }
    acc
}

/// Row-wise softmax of a matrix, optionally with a causal mask
/// (entry `(i, j)` is masked when `j > i`). Masked entries are exactly 0.
pub fn softmax_rows(a: &Tensor, causal: bool) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    if !a.is_finite() {
        return Err(Error::Numeric {
            message: "softmax input contains non-finite values".into(),
            residual: f64::NAN,
        });
    }
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        let row = a.row(i);
        let limit = if causal { (i + 1).min(c) } else { c };
        softmax_into(&row[..limit], &mut out[i * c..i * c + limit]);
    }
    Tensor::new(vec![r, c], out)
}

/// Stabilized softmax of `logits` written into `out`.
pub(crate) fn softmax_into(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0f64;
    let exps: Vec<f64> = logits
        .iter()
        .map(|&v| {
            let e = (f64::from(v) - f64::from(max)).exp();
            sum += e;
            e
        })
        .collect();
    for (o, e) in out.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
}

/// Layer normalization over the last axis.
///
/// Returns the normalized tensor together with the per-row mean and
/// standard deviation `sqrt(var + eps)` (population variance), so that
/// callers can treat the statistics as constants afterwards.
pub fn layer_norm(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (r, c) = x.dims2()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Dimension(format!(
            "layer_norm parameters of length {}/{} for rows of {c}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = vec![0.0f32; r * c];
    let mut means = Vec::with_capacity(r);
    let mut sigmas = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let (mu, sigma) = mean_and_sigma(row, eps);
        for j in 0..c {
            let v = (f64::from(row[j]) - mu) / sigma * f64::from(gamma[j]) + f64::from(beta[j]);
            out[i * c + j] = v as f32;
        }
        means.push(mu);
        sigmas.push(sigma);
    }
    Ok((Tensor::new(vec![r, c], out)?, means, sigmas))
}

/// Mean and `sqrt(population variance + eps)` of a row.
pub fn mean_and_sigma(row: &[f32], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mu;
            d * d
        })
        .sum::<f64>()
        / n;
    (mu, (var + eps).sqrt())
}

/// Root-mean-square normalization over the last axis; returns the per-row
/// `sqrt(mean(x^2) + eps)`.
pub fn rms_norm(x: &Tensor, gamma: &[f32], eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let (r, c) = x.dims2()?;
    if gamma.len() != c {
        return Err(Error::Dimension(format!(
            "rms_norm gamma of length {} for rows of {c}",
            gamma.len()
        )));
    }
    let mut out = vec![0.0f32; r * c];
    let mut scales = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let rms = root_mean_square(row, eps);
        for j in 0..c {
            out[i * c + j] = (f64::from(row[j]) / rms * f64::from(gamma[j])) as f32;
        }
        scales.push(rms);
    }
    Ok((Tensor::new(vec![r, c], out)?, scales))
}

pub fn root_mean_square(row: &[f32], eps: f64) -> f64 {
    let n = row.len() as f64;
    (row.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        / n
        + eps)
        .sqrt()
}

/// GELU, tanh approximation (the variant GPT-2 ships with).
pub fn gelu(x: f32) -> f32 {
    let x = f64::from(x);
    let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
    (0.5 * x * (1.0 + inner.tanh())) as f32
}

pub fn silu(x: f32) -> f32 {
    let x = f64::from(x);
    (x / (1.0 + (-x).exp())) as f32
}
