//! Dense row-major `f32` tensors and the handful of kernels the rest of the
//! crate needs.
//!
//! Storage is 32-bit; every reduction accumulates in `f64` in a fixed
//! left-to-right order and rounds once at the end, so results are
//! bit-reproducible on a given platform regardless of thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Dimension("tensor rank must be at least 1".into()));
        }
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "all extents must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel])
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a `rows.len() × E` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Dimension("cannot build a matrix from zero rows".into()));
        };
        let cols = first.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Dimension(format!(
                "ragged rows: expected length {cols}, found {}",
                bad.len()
            )));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn num_rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let e = self.last_dim();
        &self.data[i * e..(i + 1) * e]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.last_dim())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm, accumulated in `f64`.
    pub fn frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Dimension(format!(
                "{what} must be a matrix, got shape {other:?}"
            ))),
        }
    }
}

/// Standard matrix product `[M×K] · [K×N]`.
///
/// Each output element is accumulated in `f64` over `k = 0..K` in ascending
/// order and rounded to `f32` once.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_matrix("left operand")?;
    let (k2, n) = b.as_matrix("right operand")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a.data[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let av = f64::from(av);
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (slot, &bv) in acc.iter_mut().zip(b_row) {
                *slot += av * f64::from(bv);
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax (max-subtraction) over a score vector.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Input("softmax of an empty vector".into()));
    }
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericDomain(format!(
            "softmax input contains non-finite value {bad}"
        )));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `v / sqrt(mean(v²) + eps) ⊙ gain` applied to every last-dimension vector.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let e = x.last_dim();
    if gain.shape() != [e] {
        return Err(Error::Dimension(format!(
            "rms_norm gain shape {:?} does not match last dimension {e} of {:?}",
            gain.shape(),
            x.shape()
        )));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.rows() {
        let mean_sq = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / e as f64;
        let inv = 1.0 / (mean_sq + f64::from(eps)).sqrt();
        out.extend(
            row.iter()
                .zip(gain.data())
                .map(|(&v, &g)| (f64::from(v) * inv * f64::from(g)) as f32),
        );
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
