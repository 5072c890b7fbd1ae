//! Dense row-major `f64` tensors and the kernels the autodiff tape runs on.
//!
//! Kernels panic on shape mismatch; callers that accept external input validate
//! shapes before reaching this layer.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Dense tensor with row-major storage.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    /// Builds a tensor, returning `None` when `data.len()` disagrees with `shape`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Option<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return None;
        }
        Some(Self { shape, data })
    }

    #[track_caller]
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::new(shape.to_vec(), data).expect("tensor data length does not match shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    #[track_caller]
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::from_vec(&[rows, cols], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    #[track_caller]
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows and columns of a rank-2 tensor.
    #[track_caller]
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    #[track_caller]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    #[track_caller]
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// In-place `self += other`.
    #[track_caller]
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// In-place `self += c * other`.
    #[track_caller]
    pub fn axpy(&mut self, c: f64, other: &Self) {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * *b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[track_caller]
    pub fn matmul(&self, other: &Self) -> Self {
        let (n, k) = self.dims2();
        let (k2, m) = other.dims2();
        assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} x {:?}", self.shape, other.shape);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self { shape: vec![n, m], data: out }
    }

    pub fn transpose(&self) -> Self {
        let (n, m) = self.dims2();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Self { shape: vec![m, n], data: out }
    }

    #[track_caller]
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let (n, m) = self.dims2();
        let mut out = Vec::with_capacity(idx.len() * m);
        for &r in idx {
            assert!(r < n, "row index {r} out of range for {n} rows");
            out.extend_from_slice(&self.data[r * m..(r + 1) * m]);
        }
        Self { shape: vec![idx.len(), m], data: out }
    }

    /// Scatter-add rows of `self` into a zero matrix with `rows` rows.
    #[track_caller]
    pub fn scatter_rows(&self, idx: &[usize], rows: usize) -> Self {
        let (n, m) = self.dims2();
        assert_eq!(n, idx.len(), "scatter index count mismatch");
        let mut out = vec![0.0; rows * m];
        for (src, &dst) in idx.iter().enumerate() {
            assert!(dst < rows, "row index {dst} out of range for {rows} rows");
            for j in 0..m {
                out[dst * m + j] += self.data[src * m + j];
            }
        }
        Self { shape: vec![rows, m], data: out }
    }

    #[track_caller]
    pub fn concat_rows(&self, other: &Self) -> Self {
        let (n1, m1) = self.dims2();
        let (n2, m2) = other.dims2();
        assert_eq!(m1, m2, "concat_rows column mismatch");
        let mut data = Vec::with_capacity((n1 + n2) * m1);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self { shape: vec![n1 + n2, m1], data }
    }

    /// Adds vector `b` (length = cols) to every row.
    #[track_caller]
    pub fn add_row_broadcast(&self, b: &Self) -> Self {
        let (n, m) = self.dims2();
        assert_eq!(b.shape, [m], "row-broadcast bias shape mismatch");
        let mut data = self.data.clone();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += b.data[j];
            }
        }
        Self { shape: self.shape.clone(), data }
    }

    /// Column sums: `[n, m] -> [m]`.
    pub fn sum_rows(&self) -> Self {
        let (n, m) = self.dims2();
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += self.data[i * m + j];
            }
        }
        Self { shape: vec![m], data: out }
    }

    /// Row sums: `[n, m] -> [n]`.
    pub fn sum_cols(&self) -> Self {
        let (n, m) = self.dims2();
        let data = (0..n).map(|i| self.data[i * m..(i + 1) * m].iter().sum()).collect();
        Self { shape: vec![n], data }
    }

    /// `[m] -> [n, m]`, every row a copy of `self`.
    #[track_caller]
    pub fn broadcast_rows(&self, n: usize) -> Self {
        assert_eq!(self.shape.len(), 1, "broadcast_rows expects a vector");
        let m = self.shape[0];
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Self { shape: vec![n, m], data }
    }

    /// `[n] -> [n, m]`, every column a copy of `self`.
    #[track_caller]
    pub fn broadcast_cols(&self, m: usize) -> Self {
        assert_eq!(self.shape.len(), 1, "broadcast_cols expects a vector");
        let n = self.shape[0];
        let mut data = Vec::with_capacity(n * m);
        for &v in &self.data {
            data.extend(core::iter::repeat_n(v, m));
        }
        Self { shape: vec![n, m], data }
    }

    /// Numerically stable log-sum-exp of each row: `[n, m] -> [n]`.
    pub fn logsumexp_rows(&self) -> Self {
        let (n, m) = self.dims2();
        let data = (0..n)
            .map(|i| {
                let row = &self.data[i * m..(i + 1) * m];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !max.is_finite() {
                    return max;
                }
                let s: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
                max + libm::log(s)
            })
            .collect();
        Self { shape: vec![n], data }
    }
}
