//! Sparse `L D Lᵀ` factorization of symmetric matrices.
//!
//! Up-looking factorization driven by the elimination tree, applied after a
//! reverse Cuthill-McKee permutation. Real matrices must be positive
//! definite (every pivot strictly positive); complex symmetric matrices are
//! factored without pivoting and only fail on a vanishing pivot.

use rayon::prelude::*;

use super::ordering::reverse_cuthill_mckee;
use super::CsrMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pivots smaller than this fraction of the largest diagonal entry are
/// treated as zero.
const PIVOT_RTOL: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct LdlFactor<T> {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    // Strictly lower factor stored by columns.
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<T>,
    d_inv: Vec<T>,
}

impl<T: Scalar> LdlFactor<T> {
    /// Factors `A` with a reverse Cuthill-McKee ordering. Only the lower
    /// triangle of `A` is read; symmetry is the caller's responsibility.
    pub fn new(a: &CsrMatrix<T>) -> Result<Self> {
        let perm = reverse_cuthill_mckee(a);
        Self::with_ordering(a, perm)
    }

    pub fn with_ordering(a: &CsrMatrix<T>, perm: Vec<usize>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n || perm.len() != n {
            return Err(Error::DimensionMismatch("LDL needs a square matrix".into()));
        }
        let b = a.permute_symmetric(&perm);
        let max_diag = b.diag().iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let pivot_floor = PIVOT_RTOL * max_diag.max(f64::MIN_POSITIVE);

        // Column k of the upper triangle equals row k of the lower triangle.
        let upper_col = |k: usize| b.row(k).filter(move |&(i, _)| i <= k);

        // Elimination tree and column counts.
        let mut parent = vec![usize::MAX; n];
        let mut flag = vec![usize::MAX; n];
        let mut col_count = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for (mut i, _) in upper_col(k) {
                while i != k && flag[i] != k {
                    if parent[i] == usize::MAX {
                        parent[i] = k;
                    }
                    col_count[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            col_ptr[k + 1] = col_ptr[k] + col_count[k];
        }
        let nnz = col_ptr[n];
        let mut row_idx = vec![0usize; nnz];
        let mut values = vec![T::zero(); nnz];
        let mut fill = col_ptr[..n].to_vec();
        let mut d_inv = vec![T::zero(); n];

        let mut y = vec![T::zero(); n];
        let mut pattern: Vec<usize> = Vec::with_capacity(n);
        for k in 0..n {
            // Nonzero pattern of row k of L: union of etree paths.
            pattern.clear();
            flag[k] = k;
            let mut dk = T::zero();
            for (i, v) in upper_col(k) {
                if i == k {
                    dk = v;
                    continue;
                }
                y[i] += v;
                let mut j = i;
                while flag[j] != k {
                    flag[j] = k;
                    pattern.push(j);
                    j = parent[j];
                }
            }
            // Ascending order is a topological order (parents exceed children).
            pattern.sort_unstable();
            for &j in &pattern {
                let yj = y[j];
                y[j] = T::zero();
                for p in col_ptr[j]..fill[j] {
                    y[row_idx[p]] -= values[p] * yj;
                }
                let lkj = yj * d_inv[j];
                dk -= lkj * yj;
                row_idx[fill[j]] = k;
                values[fill[j]] = lkj;
                fill[j] += 1;
            }
            if T::IS_COMPLEX {
                if !(dk.abs() > pivot_floor) {
                    return Err(Error::SingularPivot(perm[k]));
                }
            } else if !(dk.re() > pivot_floor) {
                return Err(Error::NotSpd { row: perm[k], pivot: dk.re() });
            }
            d_inv[k] = T::one() / dk;
        }

        Ok(Self { n, perm, col_ptr, row_idx, values, d_inv })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored off-diagonal entries of `L`.
    pub fn factor_nnz(&self) -> usize {
        self.values.len()
    }

    pub fn solve(&self, b: &[T]) -> Result<Vec<T>> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "solve: factor has dimension {}, rhs has {}",
                self.n,
                b.len()
            )));
        }
        let mut x: Vec<T> = self.perm.iter().map(|&old| b[old]).collect();
        for j in 0..self.n {
            let xj = x[j];
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                x[self.row_idx[p]] -= self.values[p] * xj;
            }
        }
        for (xi, &di) in x.iter_mut().zip(&self.d_inv) {
            *xi *= di;
        }
        for j in (0..self.n).rev() {
            let mut acc = x[j];
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                acc -= self.values[p] * x[self.row_idx[p]];
            }
            x[j] = acc;
        }
        let mut out = vec![T::zero(); self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = x[new];
        }
        Ok(out)
    }

    /// Solves for several right-hand sides in parallel.
    pub fn solve_many(&self, rhs: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        rhs.par_iter().map(|b| self.solve(b)).collect()
    }
}
