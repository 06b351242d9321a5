//! Thin helpers over `faer` dense/sparse types used across the crate.

use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

use crate::error::{CoreError, Result};

pub type Sparse = SparseColMat<usize, f64>;

/// Builds a CSC matrix from (row, col, value) triplets; duplicates are summed.
pub fn sparse_from_triplets(nrows: usize, ncols: usize, trip: &[(usize, usize, f64)]) -> Sparse {
    let t: Vec<Triplet<usize, usize, f64>> = trip
        .iter()
        .map(|&(i, j, v)| Triplet::new(i, j, v))
        .collect();
    SparseColMat::try_new_from_triplets(nrows, ncols, &t).expect("valid triplets")
}

/// Sparse matrix-vector product `A x`.
pub fn spmv(a: &Sparse, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.ncols(), x.len());
    let mut y = vec![0.0; a.nrows()];
    let sym = a.symbolic();
    for j in 0..a.ncols() {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        let vals = a.val_of_col(j);
        for (k, &i) in sym.row_idx_of_col_raw(j).iter().enumerate() {
            y[i] += vals[k] * xj;
        }
    }
    y
}

/// Quadratic/bilinear form `xᵀ A y` for sparse `A`.
pub fn quad_form(a: &Sparse, x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(a.nrows(), x.len());
    assert_eq!(a.ncols(), y.len());
    let mut acc = 0.0;
    let sym = a.symbolic();
    for j in 0..a.ncols() {
        let yj = y[j];
        if yj == 0.0 {
            continue;
        }
        let vals = a.val_of_col(j);
        for (k, &i) in sym.row_idx_of_col_raw(j).iter().enumerate() {
            acc += x[i] * vals[k] * yj;
        }
    }
    acc
}

/// Dense bilinear form `xᵀ A y`.
pub fn quad_form_dense(a: &Mat<f64>, x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(a.nrows(), x.len());
    assert_eq!(a.ncols(), y.len());
    let mut acc = 0.0;
    for j in 0..a.ncols() {
        let yj = y[j];
        if yj == 0.0 {
            continue;
        }
        let mut col = 0.0;
        for i in 0..a.nrows() {
            col += x[i] * a[(i, j)];
        }
        acc += col * yj;
    }
    acc
}

/// Dense matrix-vector product.
pub fn dense_mv(a: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.ncols(), x.len());
    let mut y = vec![0.0; a.nrows()];
    for j in 0..a.ncols() {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for i in 0..a.nrows() {
            y[i] += a[(i, j)] * xj;
        }
    }
    y
}

/// Solves `A x = b` by sparse LU with partial pivoting.
pub fn solve_sparse_lu(a: &Sparse, b: &[f64]) -> Result<Vec<f64>> {
    let lu = a
        .sp_lu()
        .map_err(|e| CoreError::solver(format!("sparse LU factorization failed: {e:?}")))?;
    let rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
    let x = faer::linalg::solvers::Solve::solve(&lu, &rhs);
    Ok((0..b.len()).map(|i| x[(i, 0)]).collect())
}

/// Relative residual `|A x - b| / max(|b|, 1)` in the Euclidean norm.
pub fn relative_residual(a: &Sparse, x: &[f64], b: &[f64]) -> f64 {
    let ax = spmv(a, x);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..b.len() {
        num += (ax[i] - b[i]).powi(2);
        den += b[i].powi(2);
    }
    num.sqrt() / den.sqrt().max(1.0)
}

/// Neumaier-compensated accumulator; reduction order fixed by the caller.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}
