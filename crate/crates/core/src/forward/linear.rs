//! Linear forward map `d = A m`, used for toy problems and synthetic batches.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{check_len, fingerprint, ForwardProblem, Physics};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

pub struct LinearProblem {
    matrix: CsrMatrix<f64>,
    hash: Option<u64>,
    applies: Arc<AtomicU64>,
}

impl Clone for LinearProblem {
    fn clone(&self) -> Self {
        Self {
            matrix: self.matrix.clone(),
            hash: self.hash,
            applies: Arc::new(AtomicU64::new(self.applies.load(Ordering::Relaxed))),
        }
    }
}

impl LinearProblem {
    pub fn new(matrix: CsrMatrix<f64>) -> Self {
        Self { matrix, hash: None, applies: Arc::new(AtomicU64::new(0)) }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(CsrMatrix::identity(n))
    }

    fn check(&self, m: &[f64]) -> Result<()> {
        if self.hash != Some(fingerprint(m)) {
            return Err(Error::StaleCache);
        }
        Ok(())
    }
}

impl ForwardProblem for LinearProblem {
    fn physics(&self) -> Physics {
        Physics::Linear
    }

    fn n_cells(&self) -> usize {
        self.matrix.cols()
    }

    fn n_data(&self) -> usize {
        self.matrix.rows()
    }

    fn n_sources(&self) -> usize {
        1
    }

    fn forward(&mut self, m: &[f64]) -> Result<Vec<f64>> {
        check_len("model", m.len(), self.matrix.cols())?;
        self.hash = Some(fingerprint(m));
        self.applies.fetch_add(1, Ordering::Relaxed);
        self.matrix.spmv(m)
    }

    fn sens_matvec(&self, m: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check(m)?;
        self.applies.fetch_add(1, Ordering::Relaxed);
        self.matrix.spmv(v)
    }

    fn sens_tmatvec(&self, m: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.check(m)?;
        self.applies.fetch_add(1, Ordering::Relaxed);
        self.matrix.spmv_t(w)
    }

    fn solve_count(&self) -> u64 {
        self.applies.load(Ordering::Relaxed)
    }

    fn clear_cache(&mut self) {
        self.hash = None;
    }

    fn has_cache(&self) -> bool {
        self.hash.is_some()
    }

    fn setup_bytes(&self) -> usize {
        self.matrix.byte_size()
    }

    fn cache_bytes(&self) -> usize {
        0
    }

    fn box_clone(&self) -> Box<dyn ForwardProblem> {
        Box::new(self.clone())
    }
}
