//! Row-major dense containers: the tall `d x r` factor and the square `d x d`
//! ground-truth matrices.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A `d x r` factor matrix stored row by row, so that each item's latent
/// vector is a contiguous slice.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorMatrix {
    rows: usize,
    rank: usize,
    data: Vec<f64>,
}

impl FactorMatrix {
    pub fn zeros(rows: usize, rank: usize) -> Self {
        FactorMatrix {
            rows,
            rank,
            data: vec![0.0; rows * rank],
        }
    }

    pub fn from_fn(rows: usize, rank: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * rank);
        for i in 0..rows {
            for a in 0..rank {
                data.push(f(i, a));
            }
        }
        FactorMatrix { rows, rank, data }
    }

    pub fn from_row_major(rows: usize, rank: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * rank {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{rank} factor",
                data.len()
            )));
        }
        Ok(FactorMatrix { rows, rank, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let rank = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != rank) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Ok(FactorMatrix {
            rows: rows.len(),
            rank,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.rank
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.rank..(i + 1) * self.rank]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.rank..(i + 1) * self.rank]
    }

    #[inline]
    pub fn get(&self, i: usize, a: usize) -> f64 {
        self.data[i * self.rank + a]
    }

    #[inline]
    pub fn set(&mut self, i: usize, a: usize, v: f64) {
        self.data[i * self.rank + a] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.rank.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    /// Frobenius inner product `<self, other>`.
    pub fn dot(&self, other: &FactorMatrix) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, s: f64) -> FactorMatrix {
        FactorMatrix {
            rows: self.rows,
            rank: self.rank,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &FactorMatrix, s: f64) -> FactorMatrix {
        debug_assert_eq!(self.data.len(), other.data.len());
        FactorMatrix {
            rows: self.rows,
            rank: self.rank,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + s * b)
                .collect(),
        }
    }

    /// Right-multiplies every row by the `r x r` row-major matrix `m`.
    pub fn right_mul(&self, m: &[f64]) -> FactorMatrix {
        let r = self.rank;
        debug_assert_eq!(m.len(), r * r);
        let mut out = FactorMatrix::zeros(self.rows, r);
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = out.row_mut(i);
            for (b, d) in dst.iter_mut().enumerate() {
                *d = (0..r).map(|a| src[a] * m[a * r + b]).sum();
            }
        }
        out
    }

    /// The `d x d` product `X X^T`.
    pub fn outer_gram(&self) -> DenseMatrix {
        let d = self.rows;
        let mut out = DenseMatrix::zeros(d);
        for i in 0..d {
            for j in i..d {
                let v = dot(self.row(i), self.row(j));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.rank, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        FactorMatrix::from_fn(m.nrows(), m.ncols(), |i, a| m[(i, a)])
    }
}

/// A square `n x n` dense matrix, row-major. Used for ground truths `M`,
/// distance matrices `D` and 1-bit target matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        DenseMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        DenseMatrix::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        DenseMatrix { n, data }
    }

    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {n}x{n} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("matrix is not square".into()));
        }
        Ok(DenseMatrix {
            n,
            data: rows.concat(),
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        DenseMatrix::from_fn(n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            n: self.n,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        debug_assert_eq!(self.n, other.n);
        DenseMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        debug_assert_eq!(self.n, other.n);
        DenseMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch("matrix is not square".into()));
        }
        Ok(DenseMatrix::from_fn(m.nrows(), |i, j| m[(i, j)]))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outer_gram_matches_rows() {
        let x = FactorMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let g = x.outer_gram();
        assert_eq!(g.to_rows(), vec![vec![5.0, 1.0], vec![1.0, 10.0]]);
    }

    #[test]
    fn right_mul_identity_is_noop() {
        let x = FactorMatrix::from_fn(4, 3, |i, a| (i * 3 + a) as f64);
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(x.right_mul(&id), x);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(FactorMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(DenseMatrix::from_rows(&[vec![1.0, 2.0]]).is_err());
    }
}
