//! The evaluation interface between the optimizer and wherever the misfit
//! terms live, plus the in-process serial implementation.

use crate::error::{Error, Result};
use crate::inverse::misfit::MisfitTerm;

/// Location of the warm fields and factorizations of one term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RemoteRef {
    pub worker: usize,
    pub term: usize,
    /// Evaluation counter at which the state was produced.
    pub epoch: u64,
}

/// Misfit values and gradient at one model, summed in term order.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub values: Vec<f64>,
    pub misfit: f64,
    pub gradient: Option<Vec<f64>>,
    pub refs: Vec<RemoteRef>,
}

pub trait Executor {
    fn n_terms(&self) -> usize;

    fn n_model(&self) -> usize;

    fn evaluate(&mut self, m: &[f64], want_grad: bool) -> Result<Evaluation>;

    /// `Σ_terms Jᵀ W J v` at the model of the last evaluation.
    fn hessian_matvec(&mut self, m: &[f64], v: &[f64]) -> Result<Vec<f64>>;

    /// Total PDE solves performed by all terms.
    fn solve_count(&mut self) -> Result<u64>;
}

/// Sums per-term scalars and vectors in term-index order.
pub fn reduce_in_order<'a>(
    n: usize,
    values: impl IntoIterator<Item = f64>,
    vectors: impl IntoIterator<Item = Option<&'a Vec<f64>>>,
) -> Result<(f64, Option<Vec<f64>>)> {
    let total = values.into_iter().fold(0.0, |acc, v| acc + v);
    let mut sum: Option<Vec<f64>> = None;
    for v in vectors {
        let Some(v) = v else { continue };
        if v.len() != n {
            return Err(Error::DimensionMismatch(format!("term vector has {} entries, model has {n}", v.len())));
        }
        let s = sum.get_or_insert_with(|| vec![0.0; n]);
        s.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    Ok((total, sum))
}

pub struct SerialExecutor {
    terms: Vec<MisfitTerm>,
    n_model: usize,
    epoch: u64,
}

impl SerialExecutor {
    pub fn new(terms: Vec<MisfitTerm>) -> Result<Self> {
        let n_model = terms.first().map_or(0, MisfitTerm::n_model);
        if terms.iter().any(|t| t.n_model() != n_model) {
            return Err(Error::DimensionMismatch("misfit terms disagree on the model size".into()));
        }
        Ok(Self { terms, n_model, epoch: 0 })
    }

    pub fn terms(&self) -> &[MisfitTerm] {
        &self.terms
    }

    pub fn into_terms(self) -> Vec<MisfitTerm> {
        self.terms
    }
}

impl Executor for SerialExecutor {
    fn n_terms(&self) -> usize {
        self.terms.len()
    }

    fn n_model(&self) -> usize {
        self.n_model
    }

    fn evaluate(&mut self, m: &[f64], want_grad: bool) -> Result<Evaluation> {
        self.epoch += 1;
        let evals = self.terms.iter_mut().map(|t| t.evaluate(m, want_grad)).collect::<Result<Vec<_>>>()?;
        let values: Vec<f64> = evals.iter().map(|e| e.value).collect();
        let (misfit, gradient) =
            reduce_in_order(self.n_model, values.iter().copied(), evals.iter().map(|e| e.gradient.as_ref()))?;
        let refs = (0..self.terms.len()).map(|term| RemoteRef { worker: 0, term, epoch: self.epoch }).collect();
        Ok(Evaluation { values, misfit, gradient: if want_grad { Some(gradient.unwrap_or_else(|| vec![0.0; self.n_model])) } else { None }, refs })
    }

    fn hessian_matvec(&mut self, m: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let parts = self.terms.iter().map(|t| t.hessian_matvec(m, v)).collect::<Result<Vec<_>>>()?;
        let (_, sum) = reduce_in_order(self.n_model, std::iter::empty(), parts.iter().map(Some))?;
        Ok(sum.unwrap_or_else(|| vec![0.0; self.n_model]))
    }

    fn solve_count(&mut self) -> Result<u64> {
        Ok(self.terms.iter().map(MisfitTerm::solve_count).sum())
    }
}
