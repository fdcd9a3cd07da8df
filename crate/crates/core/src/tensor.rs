//! Dense row-major `f32` tensor and the reference GEMM.
//!
//! Every reduction here sums in ascending index order so that results are
//! reproducible bit-for-bit and comparable against naive loop oracles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// 1-D tensor over `data`.
    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input; meant for tests and fixtures.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn n_rows(&self) -> usize {
        self.data
            .len()
            .checked_div(self.last_dim())
            .unwrap_or_else(|| {
                self.shape[..self.shape.len().saturating_sub(1)]
                    .iter()
                    .product()
            })
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("expected a 2-D tensor, got {s:?}"))),
        }
    }

    /// Row `i` of the `[rows, last_dim]` view.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        Ok(Self::from_fn(&[c, r], |i| {
            let (row, col) = (i / r, i % r);
            self.data[col * c + row]
        }))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Columns `[start, start + width)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + width > c {
            return Err(Error::shape(format!(
                "column slice {start}..{} out of {c}",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Self::new(vec![r, width], out)
    }

    /// Rows `[start, start + count)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + count > r {
            return Err(Error::shape(format!(
                "row slice {start}..{} out of {r}",
                start + count
            )));
        }
        Self::new(
            vec![count, c],
            self.data[start * c..(start + count) * c].to_vec(),
        )
    }

    /// Stack 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let cols = match parts.first() {
            Some(t) => t.dims2()?.1,
            None => return Ok(Self::zeros(&[0, 0])),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(Error::shape(format!("concat: {c} columns vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, cols], data)
    }
}

/// `a[M×K] · b[K×N]`, accumulating each output in ascending `k`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims {k} vs {k2} ({:?} · {:?})",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a.data[i * k + kk];
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `x[T×K] · w[N×K]ᵀ`: the projection convention used for every linear layer.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (t, k) = x.dims2()?;
    let (n, k2) = w.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "linear: input width {k} vs weight in-features {k2}"
        )));
    }
    let mut out = vec![0.0f32; t * n];
    for i in 0..t {
        let xr = &x.data[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(xr, &w.data[j * k..(j + 1) * k]);
        }
    }
    Tensor::new(vec![t, n], out)
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

#[inline]
pub fn silu(v: f32) -> f32 {
    v * sigmoid(v)
}

/// `ln(1 + e^v)`, evaluated without overflow for large `v`.
#[inline]
pub fn softplus(v: f32) -> f32 {
    if v > 20.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

pub const RMS_EPS: f32 = 1e-5;

/// Row-wise RMS normalization with a learned gain.
pub fn rms_norm(x: &Tensor, weight: &[f32]) -> Result<Tensor> {
    let d = x.last_dim();
    if weight.len() != d {
        return Err(Error::shape(format!(
            "rms_norm weight {} vs width {d}",
            weight.len()
        )));
    }
    let mut out = x.clone();
    for r in 0..x.n_rows() {
        let row = out.row_mut(r);
        rms_norm_row(row, weight);
    }
    Ok(out)
}

pub(crate) fn rms_norm_row(row: &mut [f32], weight: &[f32]) {
    let mut ss = 0.0f32;
    for v in row.iter() {
        ss += v * v;
    }
    let inv = 1.0 / (ss / row.len() as f32 + RMS_EPS).sqrt();
    for (v, g) in row.iter_mut().zip(weight) {
        *v = *v * inv * g;
    }
}

/// Error metrics shared by tests, evaluation and search.
pub mod metrics {
    /// Mean squared difference, accumulated in `f64`.
    pub fn mse(a: &[f32], b: &[f32]) -> f64 {
        assert_eq!(a.len(), b.len());
        if a.is_empty() {
            return 0.0;
        }
        let s: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| {
                let d = (*x as f64) - (*y as f64);
                d * d
            })
            .sum();
        s / a.len() as f64
    }

    /// `‖a − b‖₂ / ‖b‖₂`, with `b` the reference. Falls back to the absolute
    /// norm when the reference is (numerically) zero.
    pub fn rel_l2(a: &[f32], reference: &[f32]) -> f64 {
        assert_eq!(a.len(), reference.len());
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (x, y) in a.iter().zip(reference) {
            let d = (*x as f64) - (*y as f64);
            num += d * d;
            den += (*y as f64) * (*y as f64);
        }
        if den < 1e-30 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }

    /// Signal-to-quantization-noise ratio in dB; `+inf` for an exact match.
    pub fn sqnr_db(approx: &[f32], reference: &[f32]) -> f64 {
        assert_eq!(approx.len(), reference.len());
        let mut sig = 0.0f64;
        let mut noise = 0.0f64;
        for (x, y) in approx.iter().zip(reference) {
            let d = (*x as f64) - (*y as f64);
            noise += d * d;
            sig += (*y as f64) * (*y as f64);
        }
        if noise == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (sig / noise).log10()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_rows(&[&[1.5, -2.0], &[0.25, 3.0]]);
        let c = matmul(&Tensor::identity(2), &a).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0], &[6.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn empty_inner_dim_gives_zero() {
        let a = Tensor::zeros(&[1, 0]);
        let b = Tensor::zeros(&[0, 1]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_is_matmul_with_transpose() {
        let x = Tensor::from_fn(&[3, 5], |i| (i as f32 * 0.37).sin());
        let w = Tensor::from_fn(&[4, 5], |i| (i as f32 * 0.11).cos());
        let a = linear(&x, &w).unwrap();
        let b = matmul(&x, &w.transpose().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn softplus_limits() {
        assert!((softplus(0.0) - std::f32::consts::LN_2).abs() < 1e-7);
        assert!(softplus(-100.0) < 1e-30);
        assert_eq!(softplus(50.0), 50.0);
    }
}
