//! Small row-major dense matrix type and the handful of kernels the
//! attention code needs.
//!
//! All reductions accumulate left to right starting from zero, so a row of
//! `X·W` computed by [`Matrix::matmul`] is bit-identical to [`vecmat`] on
//! the same row. Several exactness properties (prefill vs. append, r = 0 vs.
//! MQA) depend on that. No fused multiply-add is used anywhere.

use std::fmt::{Debug, Display};
use std::ops::{Index, IndexMut};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::instrument::add_flops;

/// Element type tag, used by the tensor archive and CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

impl Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(format!("unknown dtype {other:?} (expected f32 or f64)")),
        }
    }
}

/// Floating-point element type usable throughout the crate.
pub trait Scalar:
    Float + Debug + Display + Default + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn as_f64(self) -> f64 {
        // Float -> f64 never fails for f32/f64.
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Copy of the first `n` rows.
    pub fn top_rows(&self, n: usize) -> Self {
        assert!(n <= self.rows);
        Matrix {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }

    /// Copy of columns `start..start + width`.
    pub fn columns(&self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        Matrix::from_fn(self.rows, width, |i, j| self[(i, start + j)])
    }

    pub fn transpose(&self) -> Self {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            vecmat_into(self.row(i), rhs, out.row_mut(i));
        }
        out
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Matrix<T>) -> Self {
        assert_eq!(self.cols, rhs.cols, "matmul_t inner dimension");
        Matrix::from_fn(self.rows, rhs.rows, |i, j| dot(self.row(i), rhs.row(j)))
    }

    /// `selfᵀ · rhs`.
    pub fn t_matmul(&self, rhs: &Matrix<T>) -> Self {
        assert_eq!(self.rows, rhs.rows, "t_matmul inner dimension");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = rhs.row(k);
            for (i, &aik) in a.iter().enumerate() {
                axpy_raw(aik, b, out.row_mut(i));
            }
        }
        add_flops(2 * (self.rows * self.cols * rhs.cols) as u64);
        out
    }

    pub fn add(&self, rhs: &Matrix<T>) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "add shapes");
        add_flops(self.len() as u64);
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn sub(&self, rhs: &Matrix<T>) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "sub shapes");
        add_flops(self.len() as u64);
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        add_flops(self.len() as u64);
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    pub fn frobenius_inner(&self, rhs: &Matrix<T>) -> T {
        assert_eq!(self.shape(), rhs.shape(), "frobenius_inner shapes");
        dot(&self.data, &rhs.data)
    }

    pub fn frobenius_norm(&self) -> T {
        self.frobenius_inner(self).sqrt()
    }

    pub fn max_abs_diff(&self, rhs: &Matrix<T>) -> T {
        assert_eq!(self.shape(), rhs.shape(), "max_abs_diff shapes");
        max_abs_diff(&self.data, &rhs.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// Stacks `self` on top of `rhs`.
    pub fn vstack(&self, rhs: &Matrix<T>) -> Self {
        assert_eq!(self.cols, rhs.cols, "vstack columns");
        let mut data = self.data.clone();
        data.extend_from_slice(&rhs.data);
        Matrix {
            rows: self.rows + rhs.rows,
            cols: self.cols,
            data,
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    add_flops(2 * a.len() as u64);
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

#[inline]
fn axpy_raw<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `y += alpha · x`.
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    add_flops(2 * x.len() as u64);
    axpy_raw(alpha, x, y);
}

fn vecmat_into<T: Scalar>(x: &[T], m: &Matrix<T>, out: &mut [T]) {
    debug_assert_eq!(x.len(), m.rows);
    debug_assert_eq!(out.len(), m.cols);
    for (k, &xk) in x.iter().enumerate() {
        axpy_raw(xk, m.row(k), out);
    }
    add_flops(2 * (m.rows * m.cols) as u64);
}

/// Row vector times matrix: `x · m`.
pub fn vecmat<T: Scalar>(x: &[T], m: &Matrix<T>) -> Vec<T> {
    assert_eq!(x.len(), m.rows(), "vecmat dimension");
    let mut out = vec![T::zero(); m.cols()];
    vecmat_into(x, m, &mut out);
    out
}

/// Matrix times column vector: `m · x`.
pub fn matvec<T: Scalar>(m: &Matrix<T>, x: &[T]) -> Vec<T> {
    assert_eq!(x.len(), m.cols(), "matvec dimension");
    (0..m.rows()).map(|i| dot(m.row(i), x)).collect()
}

pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "max_abs_diff lengths");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .fold(T::zero(), |m, d| if d > m || d.is_nan() { d } else { m })
}

/// Numerically stable softmax over `logits`, accumulated in `f64`.
///
/// Counted as 5 FLOPs per position.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    add_flops(5 * logits.len() as u64);
    let max = logits
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::from_f64(e / sum)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn matmul_small() {
        let a = m(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let b = m(3, 2, &[7., 8., 9., 10., 11., 12.]);
        assert_eq!(a.matmul(&b), m(2, 2, &[58., 64., 139., 154.]));
        assert_eq!(a.matmul_t(&b.transpose()), a.matmul(&b));
        assert_eq!(a.transpose().t_matmul(&b), a.matmul(&b));
    }

    #[test]
    fn zero_width_products() {
        let a = Matrix::<f64>::zeros(4, 0);
        let b = Matrix::<f64>::zeros(3, 0);
        let p = a.matmul_t(&b);
        assert_eq!(p.shape(), (4, 3));
        assert!(p.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(Matrix::<f64>::zeros(5, 2).matmul(&Matrix::zeros(2, 0)).shape(), (5, 0));
    }

    #[test]
    fn vecmat_matches_matmul_rows_bitwise() {
        let a = Matrix::from_fn(3, 5, |i, j| ((i * 7 + j * 3) as f64).sin());
        let w = Matrix::from_fn(5, 4, |i, j| ((i * 2 + j) as f64).cos() / 3.0);
        let full = a.matmul(&w);
        for i in 0..3 {
            assert_eq!(vecmat(a.row(i), &w), full.row(i));
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1000.0f64, 1000.0, -1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert_eq!(p[2], 0.0);
        assert_eq!(softmax(&[3.0f32]), vec![1.0]);
    }

    #[test]
    fn kernels_report_flops() {
        let a = Matrix::<f64>::identity(4);
        let (_, meas) = crate::instrument::measure(|| a.matmul(&a));
        assert_eq!(meas.flops, 2 * 4 * 4 * 4);
        let (_, meas) = crate::instrument::measure(|| softmax(&[0.0f64; 10]));
        assert_eq!(meas.flops, 50);
    }
}
