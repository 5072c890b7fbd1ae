//! Compressed sparse row matrices used as constant propagation operators.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicate coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self { rows, cols, indptr, indices, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates the stored entries of row `r` as `(col, value)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn transpose(&self) -> Self {
        let triplets = (0..self.rows).flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v))).collect();
        Self::from_triplets(self.cols, self.rows, triplets)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|r| self.row(r).all(|(c, v)| (self.get(c, r) - v).abs() <= tol))
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        let cols = self.cols;
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out.data_mut()[r * cols + c] += v;
            }
        }
        out
    }

    /// Sparse times dense: `[rows, cols] x [cols, k] -> [rows, k]`.
    #[track_caller]
    pub fn matmul_dense(&self, dense: &Tensor) -> Tensor {
        let (n, k) = dense.dims2();
        assert_eq!(n, self.cols, "spmm dimension mismatch: {}x{} by {n}x{k}", self.rows, self.cols);
        let src = dense.data();
        let mut out = vec![0.0; self.rows * k];
        for r in 0..self.rows {
            let dst = &mut out[r * k..(r + 1) * k];
            for (c, v) in self.row(r) {
                for (o, &x) in dst.iter_mut().zip(&src[c * k..(c + 1) * k]) {
                    *o += v * x;
                }
            }
        }
        Tensor::matrix(self.rows, k, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spmm_matches_dense() {
        let s = CsrMatrix::from_triplets(2, 3, vec![(0, 2, 2.0), (1, 0, -1.0), (0, 0, 1.0), (0, 2, 1.0)]);
        assert_eq!(s.nnz(), 3);
        assert_eq!(s.get(0, 2), 3.0);
        let x = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(s.matmul_dense(&x), s.to_dense().matmul(&x));
        assert_eq!(s.transpose().to_dense(), s.to_dense().transpose());
    }
}
