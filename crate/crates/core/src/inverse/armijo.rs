//! Projected Armijo backtracking.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoOptions {
    pub c1: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoOptions {
    fn default() -> Self {
        Self { c1: 1e-4, max_backtracks: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmijoResult {
    pub step: f64,
    pub model: Vec<f64>,
    pub value: f64,
    /// Number of step halvings before acceptance.
    pub backtracks: usize,
}

/// Clips `m` into `[lower, upper]`.
pub fn project(m: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    m.iter().zip(lower.iter().zip(upper)).map(|(&x, (&lo, &hi))| x.clamp(lo, hi)).collect()
}

/// Accepts the first step `s ∈ {1, ½, ¼, …}` with
/// `f(P(m + s d)) ≤ f(m) + c1 ⟨g, P(m + s d) − m⟩`.
#[allow(clippy::too_many_arguments)]
pub fn projected_armijo(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    m: &[f64],
    f0: f64,
    grad: &[f64],
    direction: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: ArmijoOptions,
) -> Result<ArmijoResult> {
    let mut step = 1.0;
    for backtracks in 0..=opts.max_backtracks {
        let trial: Vec<f64> = m.iter().zip(direction).map(|(x, d)| x + step * d).collect();
        let trial = project(&trial, lower, upper);
        let decrease: f64 = grad.iter().zip(trial.iter().zip(m)).map(|(g, (t, x))| g * (t - x)).sum();
        let value = f(&trial)?;
        if value <= f0 + opts.c1 * decrease {
            return Ok(ArmijoResult { step, model: trial, value, backtracks });
        }
        step *= 0.5;
    }
    Err(Error::LineSearchFailure(opts.max_backtracks))
}
