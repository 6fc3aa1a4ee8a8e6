//! Dense row-major `f64` matrices and the handful of kernels the rest of the
//! crate needs: products, norms, column-wise softmax, hard thresholding,
//! Gram–Schmidt orthonormalization and block-pattern checks.
//!
//! Every reduction runs in a fixed loop order so results are bit-reproducible
//! on a given platform.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual bound checked when wrapping a matrix as an [`OrthonormalBasis`].
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Relative column-pivot floor below which Gram–Schmidt reports rank deficiency.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let shown: Vec<String> = row.iter().take(8).map(|v| format!("{v:>10.4e}")).collect();
            writeln!(f, "  {}{}", shown.join(" "), if self.cols > 8 { " ..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting empty shapes and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: None,
                msg: format!("non-finite entry at ({}, {})", pos / cols, pos % cols),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("ragged rows"));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let c = columns.len();
        let r = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|col| col.len() != r) {
            return Err(Error::dim("columns of differing length"));
        }
        if r == 0 || c == 0 {
            return Err(Error::dim("empty column set"));
        }
        Ok(Matrix::from_fn(r, c, |i, j| columns[j][i]))
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self.data[i * self.cols + j] = *v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Columns `start..end` as a new matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.cols, "column block out of range");
        let w = end - start;
        let mut out = Matrix::zeros(self.rows, w);
        for i in 0..self.rows {
            out.data[i * w..(i + 1) * w]
                .copy_from_slice(&self.data[i * self.cols + start..i * self.cols + end]);
        }
        out
    }

    /// Overwrites columns `start..start + block.cols()` with `block`.
    pub fn set_column_block(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.rows, self.rows);
        assert!(start + block.cols <= self.cols);
        for i in 0..self.rows {
            self.data[i * self.cols + start..i * self.cols + start + block.cols]
                .copy_from_slice(block.row(i));
        }
    }

    /// Horizontal concatenation.
    pub fn hstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let first = blocks.first().ok_or_else(|| Error::dim("hstack of nothing"))?;
        let rows = first.rows;
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::dim("hstack row counts differ"));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut at = 0;
        for b in blocks {
            out.set_column_block(at, b);
            at += b.cols;
        }
        Ok(out)
    }

    /// Reorders columns: output column `j` is input column `perm[j]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Matrix {
        assert_eq!(perm.len(), self.cols);
        Matrix::from_fn(self.rows, self.cols, |i, j| self[(i, perm[j])])
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim("axpy shape mismatch"));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Sum of elementwise products.
    pub fn dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

impl AsRef<Matrix> for Matrix {
    fn as_ref(&self) -> &Matrix {
        self
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Matrix product in i-k-j order. For each output entry the terms are
/// accumulated in increasing `k`, which is the same order as the textbook
/// triple loop.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * m..(k + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ b` without materializing the transpose of `a` by hand at call sites.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::dim(format!(
            "matmul_tn {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    matmul(&a.transpose(), b)
}

/// `a bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::dim(format!(
            "matmul_nt {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    matmul(a, &b.transpose())
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Softmax of every column, with the column maximum subtracted first.
pub fn column_softmax(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    let mut out = m.clone();
    let mut col = vec![0.0; rows];
    for j in 0..cols {
        let mut max = f64::NEG_INFINITY;
        for (i, c) in col.iter_mut().enumerate() {
            *c = m.data[i * cols + j];
            max = max.max(*c);
        }
        let mut sum = 0.0;
        for c in col.iter_mut() {
            *c = (*c - max).exp();
            sum += *c;
        }
        for (i, c) in col.iter().enumerate() {
            out.data[i * cols + j] = c / sum;
        }
    }
    out
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::param(format!("threshold tau = {tau} outside (0, 1)")));
    }
    Ok(())
}

/// Entrywise `tau * 1{x > tau}`. Ties at exactly `tau` map to zero.
pub fn hard_threshold(m: &Matrix, tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    Ok(m.map(|x| if x > tau { tau } else { 0.0 }))
}

/// A `d x m` matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct OrthonormalBasis(Matrix);

impl OrthonormalBasis {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.cols > m.rows {
            return Err(Error::dim(format!(
                "{} orthonormal columns cannot live in dimension {}",
                m.cols, m.rows
            )));
        }
        let residual = orthonormality_residual(&m);
        if residual > ORTHONORMAL_TOL {
            return Err(Error::Degenerate(format!(
                "columns not orthonormal: max |BᵀB - I| = {residual:.3e}"
            )));
        }
        Ok(OrthonormalBasis(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn ambient_dim(&self) -> usize {
        self.0.rows
    }

    pub fn rank(&self) -> usize {
        self.0.cols
    }

    /// `B Bᵀ`.
    pub fn projector(&self) -> Matrix {
        matmul_nt(&self.0, &self.0).expect("shapes agree by construction")
    }

    /// Coordinates `Bᵀ z` of `z` in the basis.
    pub fn coordinates(&self, z: &Matrix) -> Result<Matrix> {
        matmul_tn(&self.0, z)
    }

    /// `B Bᵀ z`.
    pub fn project(&self, z: &Matrix) -> Result<Matrix> {
        matmul(&self.0, &self.coordinates(z)?)
    }
}

impl AsRef<Matrix> for OrthonormalBasis {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

impl TryFrom<Matrix> for OrthonormalBasis {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        OrthonormalBasis::new(m)
    }
}

impl From<OrthonormalBasis> for Matrix {
    fn from(b: OrthonormalBasis) -> Matrix {
        b.0
    }
}

/// `max |BᵀB − I|`.
pub fn orthonormality_residual(b: &Matrix) -> f64 {
    let gram = matmul_tn(b, b).expect("square gram");
    gram.max_abs_diff(&Matrix::identity(b.cols))
}

/// Orthonormalizes the columns of `g` by modified Gram–Schmidt with one full
/// reorthogonalization pass. Each output column has its first nonzero entry
/// positive.
pub fn orthonormalize(g: &Matrix) -> Result<OrthonormalBasis> {
    let (rows, cols) = g.shape();
    if rows < cols {
        return Err(Error::dim(format!(
            "cannot orthonormalize {cols} columns in dimension {rows}"
        )));
    }
    let scale = (0..cols)
        .map(|j| g.column(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Degenerate("zero or non-finite input".into()));
    }

    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v = g.column(j);
        for _ in 0..2 {
            for prev in &q {
                let c: f64 = prev.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, pi) in v.iter_mut().zip(prev) {
                    *vi -= c * pi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= RANK_TOL * scale {
            return Err(Error::Degenerate(format!(
                "column {j} is numerically dependent (pivot {:.3e})",
                norm / scale
            )));
        }
        let sign = match v.iter().find(|x| **x != 0.0) {
            Some(first) if *first < 0.0 => -1.0,
            _ => 1.0,
        };
        for x in v.iter_mut() {
            *x *= sign / norm;
        }
        q.push(v);
    }
    OrthonormalBasis::new(Matrix::from_columns(&q)?)
}

/// True iff `m` is exactly the `N x N` matrix with `tau` on the diagonal of
/// block `k` (blocks given by `partition`) and zeros everywhere else.
pub fn block_pattern_match(m: &Matrix, partition: &[usize], k: usize, tau: f64) -> Result<bool> {
    let n: usize = partition.iter().sum();
    if m.rows != m.cols || m.rows != n {
        return Err(Error::dim(format!(
            "{}x{} matrix against partition totalling {n}",
            m.rows, m.cols
        )));
    }
    if k >= partition.len() {
        return Err(Error::dim(format!(
            "block {k} of a {}-block partition",
            partition.len()
        )));
    }
    let start: usize = partition[..k].iter().sum();
    let end = start + partition[k];
    for i in 0..n {
        for j in 0..n {
            let expected = if i == j && (start..end).contains(&i) { tau } else { 0.0 };
            if m[(i, j)] != expected {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            s
        })
    }

    /// Projector onto span(G) via the normal equations, solved by Gaussian
    /// elimination with partial pivoting. Independent of Gram–Schmidt.
    fn projector_oracle(g: &Matrix) -> Matrix {
        let gtg = naive_matmul(&g.transpose(), g);
        let n = gtg.rows();
        // Solve (GᵀG) X = Gᵀ.
        let mut aug = Matrix::zeros(n, n + g.rows());
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = gtg[(i, j)];
            }
            for j in 0..g.rows() {
                aug[(i, n + j)] = g[(j, i)];
            }
        }
        for c in 0..n {
            let piv = (c..n)
                .max_by(|&a, &b| aug[(a, c)].abs().total_cmp(&aug[(b, c)].abs()))
                .unwrap();
            for j in 0..aug.cols() {
                let t = aug[(c, j)];
                aug[(c, j)] = aug[(piv, j)];
                aug[(piv, j)] = t;
            }
            let p = aug[(c, c)];
            for j in 0..aug.cols() {
                aug[(c, j)] /= p;
            }
            for r in 0..n {
                if r != c {
                    let f = aug[(r, c)];
                    for j in 0..aug.cols() {
                        aug[(r, j)] -= f * aug[(c, j)];
                    }
                }
            }
        }
        let x = Matrix::from_fn(n, g.rows(), |i, j| aug[(i, n + j)]);
        naive_matmul(g, &x)
    }

    #[test]
    fn matmul_identity_and_zero() {
        let x = gaussian(3, 5, 1);
        assert_eq!(matmul(&Matrix::identity(3), &x).unwrap(), x);
        let z = Matrix::zeros(5, 2);
        assert_eq!(matmul(&x, &z).unwrap(), Matrix::zeros(3, 2));
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let a = gaussian(3, 4, 2);
        let b = gaussian(4, 2, 3);
        let fast = matmul(&a, &b).unwrap();
        assert_eq!(fast.max_abs_diff(&naive_matmul(&a, &b)), 0.0);
    }

    #[test]
    fn matmul_shape_error() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(Matrix::from_vec(0, 2, vec![]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_uniform_column() {
        let s = column_softmax(&Matrix::zeros(7, 2));
        for v in s.as_slice() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_saturates() {
        let s = column_softmax(&Matrix::from_rows(&[vec![50.0], vec![0.0]]).unwrap());
        assert!(s[(0, 0)] >= 1.0 - 1e-20);
        assert!(s[(1, 0)] < 1e-21);
    }

    #[test]
    fn softmax_against_direct_exponentials() {
        let s = column_softmax(&Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let total: f64 = e.iter().sum();
        for i in 0..3 {
            assert!((s[(i, 0)] - e[i] / total).abs() < 1e-15);
        }
        assert!((s.column(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_is_strict() {
        let m = Matrix::from_rows(&[vec![0.6, 0.6000001, 0.2]]).unwrap();
        let h = hard_threshold(&m, 0.6).unwrap();
        assert_eq!(h.as_slice(), &[0.0, 0.6, 0.0]);
    }

    #[test]
    fn threshold_cases() {
        let ones = Matrix::from_fn(3, 3, |_, _| 1.0);
        assert!(hard_threshold(&ones, 0.6).unwrap().as_slice().iter().all(|&v| v == 0.6));
        let uniform = column_softmax(&Matrix::zeros(5, 5));
        assert_eq!(hard_threshold(&uniform, 0.55).unwrap(), Matrix::zeros(5, 5));
        assert!(matches!(hard_threshold(&ones, 1.0), Err(Error::Parameter(_))));
        assert!(hard_threshold(&ones, 0.0).is_err());
    }

    #[test]
    fn orthonormalize_single_column() {
        let v = Matrix::from_rows(&[vec![-3.0], vec![4.0]]).unwrap();
        let b = orthonormalize(&v).unwrap();
        let got = b.matrix().as_slice();
        assert!((got[0] - 0.6).abs() < 1e-15 && (got[1] + 0.8).abs() < 1e-15, "{got:?}");
    }

    #[test]
    fn orthonormalize_orthonormal_input() {
        let q = orthonormalize(&gaussian(6, 3, 4)).unwrap();
        let again = orthonormalize(q.matrix()).unwrap();
        assert!(orthonormality_residual(again.matrix()) <= 1e-12);
        assert!(again.projector().max_abs_diff(&q.projector()) <= 1e-12);
    }

    #[test]
    fn orthonormalize_random_against_projector_oracle() {
        let g = gaussian(8, 3, 5);
        let b = orthonormalize(&g).unwrap();
        assert!(orthonormality_residual(b.matrix()) <= 1e-10);
        assert!(b.projector().max_abs_diff(&projector_oracle(&g)) <= 1e-10);
        for j in 0..3 {
            let first = b.matrix().column(j).into_iter().find(|x| *x != 0.0).unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn orthonormalize_rank_deficient() {
        let mut g = gaussian(5, 3, 6);
        let c0 = g.column(0);
        let c1 = g.column(1);
        let dependent: Vec<f64> = c0.iter().zip(&c1).map(|(a, b)| 2.0 * a - b).collect();
        g.set_column(2, &dependent);
        assert!(matches!(orthonormalize(&g), Err(Error::Degenerate(_))));
        assert!(orthonormalize(&Matrix::zeros(3, 2)).is_err());
        assert!(matches!(orthonormalize(&Matrix::zeros(2, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 4)), 0.0);
        assert!((frobenius_norm(&Matrix::identity(5)) - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(frobenius_norm(&Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap()), 5.0);
    }

    #[test]
    fn block_pattern_cases() {
        let tau = 0.7;
        let mut m = Matrix::zeros(5, 5);
        m[(0, 0)] = tau;
        m[(1, 1)] = tau;
        assert!(block_pattern_match(&m, &[2, 3], 0, tau).unwrap());
        assert!(!block_pattern_match(&m, &[2, 3], 1, tau).unwrap());
        m[(0, 1)] = tau;
        assert!(!block_pattern_match(&m, &[2, 3], 0, tau).unwrap());
        assert!(block_pattern_match(&m, &[2, 2], 0, tau).is_err());
    }

    proptest! {
        #[test]
        fn softmax_columns_normalized_and_shift_invariant(
            vals in prop::collection::vec(-15.0f64..15.0, 12),
            shift in -100.0f64..100.0,
        ) {
            let m = Matrix::from_vec(4, 3, vals).unwrap();
            let s = column_softmax(&m);
            for j in 0..3 {
                let col = s.column(j);
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(col.iter().all(|&v| v > 0.0 && v < 1.0));
            }
            let shifted = column_softmax(&m.map(|v| v + shift));
            prop_assert!(shifted.max_abs_diff(&s) <= 1e-12);
        }

        #[test]
        fn threshold_twice_is_zero(vals in prop::collection::vec(-2.0f64..2.0, 9), tau in 0.5f64..0.999) {
            let m = Matrix::from_vec(3, 3, vals).unwrap();
            let h = hard_threshold(&m, tau).unwrap();
            prop_assert!(h.as_slice().iter().all(|&v| v == 0.0 || v == tau));
            prop_assert_eq!(hard_threshold(&h, tau).unwrap(), Matrix::zeros(3, 3));
        }

        #[test]
        fn projector_invariant_under_column_mixing(seed in 0u64..10_000) {
            let g = gaussian(7, 3, seed);
            let mix = gaussian(3, 3, seed.wrapping_add(1) ^ 0x9e37);
            // Skip near-singular mixings; a Gaussian 3x3 is invertible a.s.
            let mixed = matmul(&g, &mix).unwrap();
            if let (Ok(a), Ok(b)) = (orthonormalize(&g), orthonormalize(&mixed)) {
                prop_assert!(a.projector().max_abs_diff(&b.projector()) <= 1e-9);
            }
        }
    }
}
