//! Dense row-major `f64` arrays.
//!
//! Every op in the graph treats its operands as matrices: the first extent is
//! the row count and the remaining extents are flattened into columns.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            shape: vec![1, n],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Selects rows by index, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row_slice(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape = vec![idx.len(), 1];
        } else {
            shape[0] = idx.len();
        }
        Self { shape, data }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Softmax over the entries of `x` that are not excluded.
///
/// Excluded entries are left out of the normalization and come back as
/// exactly `0.0`.
pub fn softmax(x: &[f64], excluded: Option<&[bool]>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    softmax_into(x, excluded, &mut out)?;
    Ok(out)
}

pub(crate) fn softmax_into(x: &[f64], excluded: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    let keep = |i: usize| excluded.is_none_or(|e| !e[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in x.iter().enumerate() {
        if keep(i) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySupport);
    }
    let mut total = 0.0;
    for (i, &v) in x.iter().enumerate() {
        if keep(i) {
            let e = (v - max).exp();
            out[i] = e;
            total += e;
        } else {
            out[i] = 0.0;
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        if keep(i) {
            *o /= total;
        }
    }
    Ok(())
}

/// `a (n×k) · b (k×m)` into a fresh buffer.
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (n×k) · bᵀ` where `b` is `m×k`.
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` where `a` is `n×k` and `b` is `n×m`; result `k×m`.
pub(crate) fn matmul_at(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_weights() {
        let p = softmax(&[0.0, 0.0, 0.0], None).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_two_gap() {
        let p = softmax(&[0.0, 2f64.ln()], None).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn masked_entry_recompute() {
        let p = softmax(&[5.0, 9.9, -1.2], Some(&[false, true, false])).unwrap();
        // Oracle: softmax over the two remaining logits, then reinsert a zero.
        let reduced = softmax(&[5.0, -1.2], None).unwrap();
        assert_eq!(p[1], 0.0);
        assert!((p[0] - reduced[0]).abs() < 1e-15);
        assert!((p[2] - reduced[1]).abs() < 1e-15);
        let sigma = 1.0 / (1.0 + (-(5.0f64 + 1.2)).exp());
        assert!((p[0] - sigma).abs() < 1e-15);
        assert!((p[0] + p[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_is_an_error() {
        assert!(matches!(
            softmax(&[1.0, 2.0], Some(&[true, true])),
            Err(Error::EmptySupport)
        ));
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::zeros(&[2, 3, 4]).cols(), 12);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        // bᵀ laid out as 2x3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_bt(&a, &bt, 2, 3, 2), c);
        // aᵀ·b with a 3x2 (the transpose of the 2x3 above)
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_at(&at, &b, 3, 2, 2), c);
    }
}
