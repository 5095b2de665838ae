use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row count above which `spmv` splits rows across the rayon pool. Each row
/// is reduced sequentially, so results do not depend on the thread count.
const PAR_ROWS: usize = 4096;

/// Compressed sparse row matrix.
///
/// Column indices are sorted and unique within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, T)]) -> Result<Self> {
        let mut counts = vec![0usize; rows + 1];
        for &(r, c, _) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::DimensionMismatch(format!(
                    "triplet ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            counts[r + 1] += 1;
        }
        for i in 0..rows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols_raw = vec![0usize; triplets.len()];
        let mut vals_raw = vec![T::zero(); triplets.len()];
        for &(r, c, v) in triplets {
            let k = next[r];
            cols_raw[k] = c;
            vals_raw[k] = v;
            next[r] += 1;
        }

        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut data = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut row_buf: Vec<(usize, T)> = Vec::new();
        for r in 0..rows {
            row_buf.clear();
            row_buf.extend((counts[r]..counts[r + 1]).map(|k| (cols_raw[k], vals_raw[k])));
            row_buf.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for &(c, v) in &row_buf {
                if last == Some(c) {
                    *data.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    data.push(v);
                    last = Some(c);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self { rows, cols, indptr, indices, data })
    }

    /// Builds from raw CSR arrays, validating the structural invariants.
    pub fn from_raw(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        data: Vec<T>,
    ) -> Result<Self> {
        if indptr.len() != rows + 1 || indptr[0] != 0 || indices.len() != data.len() {
            return Err(Error::DimensionMismatch("malformed CSR arrays".into()));
        }
        if *indptr.last().unwrap() != indices.len() {
            return Err(Error::DimensionMismatch("indptr does not cover indices".into()));
        }
        for r in 0..rows {
            if indptr[r] > indptr[r + 1] {
                return Err(Error::DimensionMismatch("row offsets not monotone".into()));
            }
            let row = &indices[indptr[r]..indptr[r + 1]];
            if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&c| c >= cols) {
                return Err(Error::DimensionMismatch(format!("row {r} has unsorted or out-of-range columns")));
            }
        }
        Ok(Self { rows, cols, indptr, indices, data })
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![T::one(); n])
    }

    pub fn diagonal(diag: &[T]) -> Self {
        let n = diag.len();
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            data: diag.to_vec(),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, indptr: vec![0; rows + 1], indices: Vec::new(), data: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Iterator over `(col, value)` of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        self.indices[a..b].iter().copied().zip(self.data[a..b].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        match self.indices[a..b].binary_search(&c) {
            Ok(k) => self.data[a + k],
            Err(_) => T::zero(),
        }
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x`
    pub fn spmv(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "spmv: matrix has {} columns, vector has {}",
                self.cols,
                x.len()
            )));
        }
        let mut y = vec![T::zero(); self.rows];
        self.spmv_into(x, &mut y);
        Ok(y)
    }

    /// Unchecked variant of [`spmv`](Self::spmv) writing into `y`.
    pub fn spmv_into(&self, x: &[T], y: &mut [T]) {
        let row_dot = |r: usize| -> T {
            let mut acc = T::zero();
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.data[k] * x[self.indices[k]];
            }
            acc
        };
        if self.rows >= PAR_ROWS {
            y.par_iter_mut().enumerate().for_each(|(r, yr)| *yr = row_dot(r));
        } else {
            for (r, yr) in y.iter_mut().enumerate() {
                *yr = row_dot(r);
            }
        }
    }

    /// `y = Aᵀ x` (no conjugation).
    pub fn spmv_t(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.rows {
            return Err(Error::DimensionMismatch(format!(
                "spmv_t: matrix has {} rows, vector has {}",
                self.rows,
                x.len()
            )));
        }
        let mut y = vec![T::zero(); self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for k in self.indptr[r]..self.indptr[r + 1] {
                y[self.indices[k]] += self.data[k] * xr;
            }
        }
        Ok(y)
    }

    /// Multiplies a block of column vectors, columns processed in parallel.
    pub fn spmm(&self, block: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        block.par_iter().map(|x| self.spmv(x)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut indices = vec![0usize; self.nnz()];
        let mut data = vec![T::zero(); self.nnz()];
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k];
                indices[next[c]] = r;
                data[next[c]] = self.data[k];
                next[c] += 1;
            }
        }
        Self { rows: self.cols, cols: self.rows, indptr: counts, indices, data }
    }

    pub fn to_triplets(&self) -> Vec<(usize, usize, T)> {
        (0..self.rows).flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v))).collect()
    }

    /// Sparse product `A B`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut indptr = vec![0usize];
        let mut indices = Vec::new();
        let mut data = Vec::new();
        let mut acc = vec![T::zero(); other.cols];
        let mut marker = vec![usize::MAX; other.cols];
        let mut pattern = Vec::new();
        for r in 0..self.rows {
            pattern.clear();
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if marker[c] != r {
                        marker[c] = r;
                        acc[c] = T::zero();
                        pattern.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            pattern.sort_unstable();
            for &c in &pattern {
                indices.push(c);
                data.push(acc[c]);
            }
            indptr.push(indices.len());
        }
        Ok(Self { rows: self.rows, cols: other.cols, indptr, indices, data })
    }

    /// `alpha A + beta B` for matrices of equal shape.
    pub fn add_scaled(&self, alpha: T, other: &Self, beta: T) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch("add: shapes differ".into()));
        }
        let mut t: Vec<(usize, usize, T)> = self.to_triplets().into_iter().map(|(r, c, v)| (r, c, alpha * v)).collect();
        t.extend(other.to_triplets().into_iter().map(|(r, c, v)| (r, c, beta * v)));
        Self::from_triplets(self.rows, self.cols, &t)
    }

    /// `diag(left) A diag(right)`; either side may be omitted.
    pub fn scale(&self, left: Option<&[T]>, right: Option<&[T]>) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let mut v = self.data[k];
                if let Some(l) = left {
                    v = l[r] * v;
                }
                if let Some(rt) = right {
                    v *= rt[self.indices[k]];
                }
                out.data[k] = v;
            }
        }
        out
    }

    /// Symmetric permutation `P A Pᵀ` where `perm[new] = old`.
    pub fn permute_symmetric(&self, perm: &[usize]) -> Self {
        let n = self.rows;
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let t: Vec<_> = self.to_triplets().into_iter().map(|(r, c, v)| (inv[r], inv[c], v)).collect();
        Self::from_triplets(n, n, &t).expect("permutation preserves shape")
    }

    /// Dense row-major copy, for tests and small oracles.
    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut d = vec![vec![T::zero(); self.cols]; self.rows];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                d[r][c] = v;
            }
        }
        d
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> CsrMatrix<U> {
        CsrMatrix {
            rows: self.rows,
            cols: self.cols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute entry of `A - Aᵀ`.
    pub fn asymmetry(&self) -> f64 {
        let t = self.transpose();
        match self.add_scaled(T::one(), &t, -T::one()) {
            Ok(d) => d.data.iter().fold(0.0, |m, v| m.max(v.abs())),
            Err(_) => f64::INFINITY,
        }
    }

    /// Approximate heap footprint, used for traffic accounting.
    pub fn byte_size(&self) -> usize {
        (self.indptr.len() + self.indices.len()) * std::mem::size_of::<usize>()
            + self.data.len() * std::mem::size_of::<T>()
    }
}
