//! Small dense symmetric helpers: Cholesky with pivot reporting and
//! eigenvalue utilities.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// In-place lower Cholesky of a row-major `n x n` symmetric matrix.
///
/// Returns `(smallest pivot, largest pivot)` where a pivot is the squared
/// diagonal of the factor, or `None` if a pivot is not positive.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Option<(f64, f64)> {
    let mut min_p = f64::INFINITY;
    let mut max_p = 0.0f64;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        min_p = min_p.min(d);
        max_p = max_p.max(d);
        let ljj = d.sqrt();
        a[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / ljj;
        }
    }
    Some((min_p, max_p))
}

/// Solves `L L' x = b` in place given the factor from [`cholesky_in_place`].
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Cholesky factor of a symmetric positive definite matrix with a relative
/// pivot tolerance.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    l: DMatrix<f64>,
}

impl SpdFactor {
    /// Factors `a`, failing with [`Error::RankDeficient`] when a pivot drops
    /// below `rel_tol` times the largest diagonal entry.
    pub fn new(a: &DMatrix<f64>, block: &'static str, rel_tol: f64) -> Result<Self> {
        let n = a.nrows();
        let largest = (0..n).map(|i| a[(i, i)]).fold(0.0f64, f64::max);
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > rel_tol * largest) || !(largest > 0.0) {
                return Err(Error::RankDeficient {
                    block,
                    pivot: d,
                    largest,
                });
            }
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Overwrites `b` with `L^{-1} b`.
    pub fn forward_mut(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        for c in 0..b.ncols() {
            for i in 0..n {
                let mut s = b[(i, c)];
                for k in 0..i {
                    s -= self.l[(i, k)] * b[(k, c)];
                }
                b[(i, c)] = s / self.l[(i, i)];
            }
        }
    }

    /// Overwrites `b` with `L'^{-1} b`.
    pub fn backward_mut(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        for c in 0..b.ncols() {
            for i in (0..n).rev() {
                let mut s = b[(i, c)];
                for k in i + 1..n {
                    s -= self.l[(k, i)] * b[(k, c)];
                }
                b[(i, c)] = s / self.l[(i, i)];
            }
        }
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.forward_mut(&mut x);
        self.backward_mut(&mut x);
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        let x = self.solve(&m);
        DVector::from_column_slice(x.as_slice())
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.dim(), self.dim()))
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
