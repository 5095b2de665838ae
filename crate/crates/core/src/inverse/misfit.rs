//! Data misfits and the misfit term that chains mesh transfer, model map and
//! a forward problem.

use crate::error::{Error, Result};
use crate::forward::{fingerprint, ForwardProblem};
use crate::inverse::model_map::ModelMap;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MisfitKind {
    /// `½ ‖w ∘ (d_pred − d)‖²`.
    WeightedL2,
    /// `Σ w (√(r² + ε²) − ε)` per real component.
    SmoothL1 { eps: f64 },
}

/// Value, residual and data-space derivatives of a misfit.
#[derive(Debug, Clone, PartialEq)]
pub struct MisfitEval {
    pub value: f64,
    pub residual: Vec<f64>,
    /// `∂φ/∂d_pred`.
    pub gradient: Vec<f64>,
    /// Diagonal data-space weights of the Gauss-Newton Hessian. For the
    /// smooth ℓ¹ misfit these are the reweighting factors `w / √(r² + ε²)`.
    pub hessian_weights: Vec<f64>,
}

impl MisfitKind {
    pub fn eval(&self, predicted: &[f64], observed: &[f64], weights: &[f64]) -> Result<MisfitEval> {
        if predicted.len() != observed.len() || weights.len() != observed.len() {
            return Err(Error::DimensionMismatch(format!(
                "predicted {}, observed {}, weights {}",
                predicted.len(),
                observed.len(),
                weights.len()
            )));
        }
        let residual: Vec<f64> = predicted.iter().zip(observed).map(|(p, d)| p - d).collect();
        let n = residual.len();
        let (mut value, mut gradient, mut hw) = (0.0, Vec::with_capacity(n), Vec::with_capacity(n));
        match *self {
            Self::WeightedL2 => {
                for (r, w) in residual.iter().zip(weights) {
                    let w2 = w * w;
                    value += 0.5 * w2 * r * r;
                    gradient.push(w2 * r);
                    hw.push(w2);
                }
            }
            Self::SmoothL1 { eps } => {
                if !(eps > 0.0) {
                    return Err(Error::InvalidArgument(format!("smooth l1 needs eps > 0, got {eps}")));
                }
                for (r, w) in residual.iter().zip(weights) {
                    let s = (r * r + eps * eps).sqrt();
                    value += w * (s - eps);
                    gradient.push(w * r / s);
                    hw.push(w / s);
                }
            }
        }
        Ok(MisfitEval { value, residual, gradient, hessian_weights: hw })
    }
}

/// Result of evaluating one term at a model.
#[derive(Debug, Clone, PartialEq)]
pub struct TermEval {
    pub value: f64,
    pub gradient: Option<Vec<f64>>,
    /// Forward, linearized and adjoint solves performed by the term so far.
    pub solves: u64,
}

#[derive(Clone)]
struct TermState {
    hash: u64,
    /// Coefficients handed to the forward problem.
    coeff: Vec<f64>,
    map_deriv: Vec<f64>,
    eval: MisfitEval,
}

/// One summand `φ(F(map(T m)), d, w)` of the objective.
#[derive(Clone)]
pub struct MisfitTerm {
    forward: Box<dyn ForwardProblem>,
    observed: Vec<f64>,
    weights: Vec<f64>,
    kind: MisfitKind,
    map: ModelMap,
    transfer: Option<CsrMatrix<f64>>,
    n_model: usize,
    state: Option<TermState>,
}

impl MisfitTerm {
    /// `transfer` maps the model mesh onto the simulation mesh; `None` means
    /// the two coincide.
    pub fn new(
        forward: Box<dyn ForwardProblem>,
        observed: Vec<f64>,
        weights: Vec<f64>,
        kind: MisfitKind,
        map: ModelMap,
        transfer: Option<CsrMatrix<f64>>,
    ) -> Result<Self> {
        let nd = forward.n_data();
        if observed.len() != nd || weights.len() != nd {
            return Err(Error::DimensionMismatch(format!(
                "forward problem produces {nd} data; got {} observations and {} weights",
                observed.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("misfit weights must be non-negative".into()));
        }
        let n_model = match &transfer {
            Some(t) => {
                if t.rows() != forward.n_cells() {
                    return Err(Error::DimensionMismatch(format!(
                        "transfer has {} rows for {} simulation cells",
                        t.rows(),
                        forward.n_cells()
                    )));
                }
                t.cols()
            }
            None => forward.n_cells(),
        };
        Ok(Self { forward, observed, weights, kind, map, transfer, n_model, state: None })
    }

    pub fn n_model(&self) -> usize {
        self.n_model
    }

    pub fn forward_problem(&self) -> &dyn ForwardProblem {
        self.forward.as_ref()
    }

    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> MisfitKind {
        self.kind
    }

    pub fn map(&self) -> ModelMap {
        self.map
    }

    /// Bytes needed to ship the term to a worker.
    pub fn payload_bytes(&self) -> usize {
        self.forward.setup_bytes()
            + 16 * self.observed.len()
            + self.transfer.as_ref().map_or(0, |t| t.byte_size())
    }

    pub fn cache_bytes(&self) -> usize {
        self.forward.cache_bytes()
    }

    pub fn solve_count(&self) -> u64 {
        self.forward.solve_count()
    }

    /// True when the forward cache is warm for `m`.
    pub fn is_warm(&self, m: &[f64]) -> bool {
        self.state.as_ref().is_some_and(|s| s.hash == fingerprint(m)) && self.forward.has_cache()
    }

    pub fn clear_cache(&mut self) {
        self.state = None;
        self.forward.clear_cache();
    }

    /// Predicted data at the last evaluated model.
    pub fn predicted(&self) -> Option<Vec<f64>> {
        self.state
            .as_ref()
            .map(|s| s.eval.residual.iter().zip(&self.observed).map(|(r, d)| r + d).collect())
    }

    fn to_simulation(&self, m: &[f64]) -> Result<Vec<f64>> {
        match &self.transfer {
            Some(t) => t.spmv(m),
            None => Ok(m.to_vec()),
        }
    }

    /// Evaluates the misfit, reusing the forward solution when `m` matches
    /// the cached model.
    pub fn evaluate(&mut self, m: &[f64], want_grad: bool) -> Result<TermEval> {
        if m.len() != self.n_model {
            return Err(Error::DimensionMismatch(format!("model has {} entries, term expects {}", m.len(), self.n_model)));
        }
        if !self.is_warm(m) {
            self.state = None;
            let x = self.to_simulation(m)?;
            let (coeff, map_deriv) = self.map.apply(&x);
            let pred = self.forward.forward(&coeff)?;
            let eval = self.kind.eval(&pred, &self.observed, &self.weights)?;
            self.state = Some(TermState { hash: fingerprint(m), coeff, map_deriv, eval });
        }
        let state = self.state.as_ref().expect("state set above");
        let gradient = if want_grad { Some(self.jt(state, &state.eval.gradient)?) } else { None };
        Ok(TermEval { value: state.eval.value, gradient, solves: self.forward.solve_count() })
    }

    fn state_for(&self, m: &[f64]) -> Result<&TermState> {
        match &self.state {
            Some(s) if s.hash == fingerprint(m) => Ok(s),
            _ => Err(Error::StaleCache),
        }
    }

    fn jv(&self, state: &TermState, v: &[f64]) -> Result<Vec<f64>> {
        let tv = self.to_simulation(v)?;
        let dv: Vec<f64> = tv.iter().zip(&state.map_deriv).map(|(a, b)| a * b).collect();
        self.forward.sens_matvec(&state.coeff, &dv)
    }

    fn jt(&self, state: &TermState, w: &[f64]) -> Result<Vec<f64>> {
        let g = self.forward.sens_tmatvec(&state.coeff, w)?;
        let scaled: Vec<f64> = g.iter().zip(&state.map_deriv).map(|(a, b)| a * b).collect();
        match &self.transfer {
            Some(t) => t.spmv_t(&scaled),
            None => Ok(scaled),
        }
    }

    /// Model-space sensitivity product `J v` of the full chain.
    pub fn sens_matvec(&self, m: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.jv(self.state_for(m)?, v)
    }

    pub fn sens_tmatvec(&self, m: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.jt(self.state_for(m)?, w)
    }

    /// Gauss-Newton Hessian product `Jᵀ diag(h) J v`.
    pub fn hessian_matvec(&self, m: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let state = self.state_for(m)?;
        let jv = self.jv(state, v)?;
        let w: Vec<f64> = jv.iter().zip(&state.eval.hessian_weights).map(|(a, b)| a * b).collect();
        self.jt(state, &w)
    }
}
