//! Dense numeric kernels shared by every other module.
//!
//! Everything is `f32` storage. Dot products and norm statistics accumulate
//! in `f64` and round once at the end; matrix products accumulate in `f32`
//! in a fixed `i-k-j` order so results are reproducible across calls.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix. Rows are vectors in the embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

/// A sequence of embedding vectors, one per row.
pub type VectorSeq = Matrix;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Ok(Self::zeros(0, 0));
        };
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimMismatch(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// An empty sequence of `cols`-dimensional vectors.
    pub fn empty(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::DimMismatch(format!(
                "pushing {} values onto {}-column matrix",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, with every entry an [`inner`] product of rows.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimMismatch(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.data[i * other.rows + j] = inner(self.row(i), other.row(j));
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimMismatch(format!(
                "add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_broadcast(&mut self, bias: &[f32]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::DimMismatch(format!(
                "broadcast {} values over {} columns",
                bias.len(),
                self.cols
            )));
        }
        for i in 0..self.rows {
            for (a, b) in self.row_mut(i).iter_mut().zip(bias) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols, "column slice out of range");
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row slice out of range");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices of equal width vertically.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.iter().find(|m| m.cols > 0).map_or(0, |m| m.cols);
        let mut out = Matrix::empty(cols);
        for p in parts {
            if p.rows == 0 {
                continue;
            }
            if p.cols != cols {
                return Err(Error::DimMismatch(format!("vstack {} columns onto {cols}", p.cols)));
            }
            out.data.extend_from_slice(&p.data);
            out.rows += p.rows;
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Point-wise nonlinearity of the feed-forward blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    GeluTanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::GeluTanh => {
                let c = (2.0f32 / std::f32::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
            }
        }
    }

    pub fn apply_slice(self, v: &mut [f32]) {
        for x in v {
            *x = self.apply(*x);
        }
    }
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_in_place(v: &mut [f32]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::EmptySoftmax);
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += f64::from(*x);
    }
    let inv = (1.0 / sum) as f32;
    for x in v.iter_mut() {
        *x *= inv;
    }
    Ok(())
}

/// `log softmax(v)` in `f64`.
pub fn log_softmax(v: &[f32]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptySoftmax);
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max + v.iter().map(|&x| (f64::from(x) - max).exp()).sum::<f64>().ln();
    Ok(v.iter().map(|&x| f64::from(x) - lse).collect())
}

/// `scale · v / sqrt(mean(v²) + eps)`; no centering, no bias.
pub fn rms_norm(v: &[f32], scale: &[f32], eps: f32) -> Result<Vec<f32>> {
    check_len(v.len(), scale.len(), "rms_norm scale")?;
    if v.is_empty() {
        return Err(Error::EmptySequence);
    }
    let ms = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>() / v.len() as f64;
    let denom = ms + f64::from(eps);
    if denom <= 0.0 {
        return Err(Error::DegenerateNorm);
    }
    let inv = (1.0 / denom.sqrt()) as f32;
    Ok(v.iter().zip(scale).map(|(&x, &s)| s * (x * inv)).collect())
}

/// Mean-centred, variance-normalised, then `scale · x + bias`.
pub fn layer_norm_standard(v: &[f32], scale: &[f32], bias: &[f32], eps: f32) -> Result<Vec<f32>> {
    check_len(v.len(), scale.len(), "layer_norm scale")?;
    check_len(v.len(), bias.len(), "layer_norm bias")?;
    if v.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = v
        .iter()
        .map(|&x| {
            let d = f64::from(x) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let denom = var + f64::from(eps);
    if denom <= 0.0 {
        return Err(Error::DegenerateNorm);
    }
    let inv = 1.0 / denom.sqrt();
    Ok(v.iter()
        .zip(scale.iter().zip(bias))
        .map(|(&x, (&s, &b))| s * (((f64::from(x) - mean) * inv) as f32) + b)
        .collect())
}

/// Inner product, accumulated in `f64`.
#[inline]
pub fn inner(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len(), "inner: length mismatch");
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum::<f64>() as f32
}

pub fn try_inner(a: &[f32], b: &[f32]) -> Result<f32> {
    check_len(a.len(), b.len(), "inner")?;
    Ok(inner(a, b))
}

pub fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt() as f32
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f32> {
    check_len(a.len(), b.len(), "cosine")?;
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroNormCosine);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0) as f32)
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> Result<usize> {
    if v.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Same as [`argmax`] over `f64` scores.
pub fn argmax_f64(v: &[f64]) -> Result<usize> {
    if v.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        assert!(close(&softmax(&[0.0, 0.0]).unwrap(), &[0.5, 0.5], 1e-7));
        let third = 1.0 / 3.0;
        assert!(close(
            &softmax(&[1000.0, 1000.0, 1000.0]).unwrap(),
            &[third, third, third],
            1e-7
        ));
        // e^0 / (e^0 + e^{ln 3}) = 1/4
        assert!(close(&softmax(&[0.0, 3.0f32.ln()]).unwrap(), &[0.25, 0.75], 1e-6));
        assert!(matches!(softmax(&[]), Err(Error::EmptySoftmax)));
    }

    #[test]
    fn rms_norm_examples() {
        let r = 12.5f32.sqrt();
        let out = rms_norm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!(close(&out, &[3.0 / r, 4.0 / r], 1e-6));
        assert!(close(&out, &[0.8485, 1.1314], 1e-4));
        let c = rms_norm(&[2.5; 5], &[1.0; 5], 0.0).unwrap();
        assert!(close(&c, &[1.0; 5], 1e-6));
        let doubled = rms_norm(&[3.0, 4.0], &[2.0, 2.0], 0.0).unwrap();
        assert!(close(&doubled, &[6.0 / r, 8.0 / r], 1e-6));
        assert!(matches!(
            rms_norm(&[0.0, 0.0], &[1.0, 1.0], 0.0),
            Err(Error::DegenerateNorm)
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm_standard(&[1.0, 3.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert!(close(&out, &[-1.0, 1.0], 1e-6));
        let fixed = [-1.0, 1.0, -1.0, 1.0];
        let out = layer_norm_standard(&fixed, &[1.0; 4], &[0.0; 4], 0.0).unwrap();
        assert!(close(&out, &fixed, 1e-6));
        let out = layer_norm_standard(&[1.0, 3.0], &[0.0, 0.0], &[5.0, 5.0], 0.0).unwrap();
        assert_eq!(out, vec![5.0, 5.0]);
        assert!(matches!(
            layer_norm_standard(&[4.0], &[1.0], &[0.0], 0.0),
            Err(Error::DegenerateNorm)
        ));
    }

    #[test]
    fn inner_and_cosine_examples() {
        assert_eq!(inner(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(inner(&[1.0, 2.0], &[3.0, 4.0]), 11.0);
        let v = [0.3, -1.2, 2.0];
        let w: Vec<f32> = v.iter().map(|x| 3.0 * x).collect();
        assert!((cosine(&v, &w).unwrap() - 1.0).abs() < 1e-6);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNormCosine)));
        assert!(matches!(try_inner(&[1.0], &[1.0, 2.0]), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn matmul_and_argmax_examples() {
        let b = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&b).unwrap(), b);
        let one = Matrix::new(1, 1, vec![2.0])
            .unwrap()
            .matmul(&Matrix::new(1, 1, vec![3.0]).unwrap())
            .unwrap();
        assert_eq!(one.data(), &[6.0]);
        assert!(matches!(b.matmul(&b), Err(Error::DimMismatch(_))));
        assert_eq!(argmax(&[1.0, 3.0, 3.0]).unwrap(), 1);
        assert_eq!(b.transpose().transpose(), b);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(Activation::GeluTanh.apply(0.0), 0.0);
        // gelu_tanh(1) = 0.8411920
        assert!((Activation::GeluTanh.apply(1.0) - 0.841_192).abs() < 1e-5);
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
    }

    fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-20.0f32..20.0, n)
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(q in prop::collection::vec(-3200i32..3200, 1..32), c in -100i32..100) {
            // multiples of 1/64 so that the shift itself is exact in f32
            let v: Vec<f32> = q.iter().map(|&x| x as f32 / 64.0).collect();
            let c = c as f32;
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().map(|&x| f64::from(x)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            let shifted: Vec<f32> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn rms_norm_is_scale_invariant(v in finite_vec(8), alpha in 0.01f32..100.0) {
            prop_assume!(l2_norm(&v) > 1e-2);
            let ones = vec![1.0; 8];
            let a = rms_norm(&v, &ones, 0.0).unwrap();
            let scaled: Vec<f32> = v.iter().map(|x| x * alpha).collect();
            let b = rms_norm(&scaled, &ones, 0.0).unwrap();
            prop_assert!(close(&a, &b, 1e-5));
            let rms = (a.iter().map(|x| x * x).sum::<f32>() / 8.0).sqrt();
            prop_assert!((rms - 1.0).abs() <= 1e-5);
        }

        #[test]
        fn inner_symmetric_and_cosine_consistent(a in finite_vec(6), b in finite_vec(6)) {
            prop_assert_eq!(inner(&a, &b), inner(&b, &a));
            prop_assume!(l2_norm(&a) > 1e-3 && l2_norm(&b) > 1e-3);
            let c = cosine(&a, &b).unwrap();
            let expect = inner(&a, &b) / (l2_norm(&a) * l2_norm(&b));
            prop_assert!((c - expect).abs() <= 1e-5 * (1.0 + expect.abs()));
            prop_assert!((-1.0..=1.0).contains(&c));
        }

        #[test]
        fn matmul_associative(
            a in prop::collection::vec(-1.0f32..1.0, 12),
            b in prop::collection::vec(-1.0f32..1.0, 20),
            c in prop::collection::vec(-1.0f32..1.0, 10),
        ) {
            let a = Matrix::new(3, 4, a).unwrap();
            let b = Matrix::new(4, 5, b).unwrap();
            let c = Matrix::new(5, 2, c).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) <= 1e-4);
        }
    }
}
