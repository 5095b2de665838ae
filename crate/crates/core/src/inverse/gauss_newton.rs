//! Projected Gauss-Newton for `min Σ φ_i(m) + α R(m)` subject to
//! `m_L ≤ m ≤ m_H`.
//!
//! Each iteration splits the variables into an active set (at a bound with
//! the gradient pushing outward) and the rest. The inactive part of the step
//! comes from a few PCG iterations on the reduced Gauss-Newton system,
//! preconditioned by the regularizer Hessian; the active part is a scaled
//! projected steepest-descent step. A projected Armijo search then picks the
//! step length.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::inverse::armijo::{project, projected_armijo, ArmijoOptions};
use crate::inverse::executor::{Executor, RemoteRef};
use crate::inverse::regularizer::Regularizer;
use crate::sparse::{CsrMatrix, LdlFactor};

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch("bound vectors differ in length".into()));
        }
        if let Some(i) = lower.iter().zip(&upper).position(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument(format!("lower bound exceeds upper bound at {i}")));
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(n: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; n], vec![upper; n])
    }

    pub fn unbounded(n: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; n], upper: vec![f64::INFINITY; n] }
    }

    pub fn contains(&self, m: &[f64]) -> bool {
        m.iter().zip(self.lower.iter().zip(&self.upper)).all(|(x, (l, u))| l <= x && x <= u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioning {
    /// Factor `L + μ I` of the regularizer Hessian restricted to the inactive set.
    RegularizerHessian,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnOptions {
    pub max_gn: usize,
    pub max_pcg: usize,
    /// Relative residual at which PCG stops early.
    pub pcg_tol: f64,
    pub alpha: f64,
    pub armijo: ArmijoOptions,
    /// Stop when the projected gradient falls below this fraction of its
    /// initial norm.
    pub grad_tol: f64,
    /// A variable within `active_eps · (m_H − m_L)` of a bound counts as on it.
    pub active_eps: f64,
    /// Caps `max |δm|` before the line search.
    pub max_step: Option<f64>,
    pub preconditioning: Preconditioning,
    /// Shift `μ` relative to the mean diagonal of the regularizer Hessian.
    pub precond_shift: f64,
    /// Keep every accepted model in [`GnState::iterates`].
    pub keep_iterates: bool,
}

impl GnOptions {
    pub fn new(alpha: f64) -> Self {
        Self {
            max_gn: 10,
            max_pcg: 8,
            pcg_tol: 1e-2,
            alpha,
            armijo: ArmijoOptions::default(),
            grad_tol: 1e-3,
            active_eps: 1e-12,
            max_step: None,
            preconditioning: Preconditioning::RegularizerHessian,
            precond_shift: 1e-3,
            keep_iterates: false,
        }
    }
}

/// One accepted Gauss-Newton step. `objective`, `misfit` and `reg` are
/// measured after the step; `proj_grad_norm` and `active_count` at the
/// iterate the step started from. The objective is `misfit + α · reg`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub misfit: f64,
    pub reg: f64,
    pub proj_grad_norm: f64,
    pub pcg_iters: usize,
    pub ls_steps: usize,
    pub active_count: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GnStatus {
    MaxIterations,
    Converged,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnState {
    pub model: Vec<f64>,
    pub bounds: Bounds,
    pub iteration: usize,
    pub initial_objective: f64,
    pub initial_misfit: f64,
    pub initial_reg: f64,
    pub history: Vec<IterationRecord>,
    pub active: Vec<bool>,
    pub refs: Vec<RemoteRef>,
    pub status: GnStatus,
    /// Starting model followed by every accepted iterate, when requested.
    pub iterates: Vec<Vec<f64>>,
}

impl GnState {
    pub fn final_objective(&self) -> f64 {
        self.history.last().map_or(self.initial_objective, |r| r.objective)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Variables on a bound whose gradient points out of the feasible box.
pub fn active_set(m: &[f64], g: &[f64], bounds: &Bounds, eps: f64) -> Vec<bool> {
    m.iter()
        .zip(g)
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|((&x, &gi), (&lo, &hi))| {
            let tol = if (hi - lo).is_finite() { eps * (hi - lo) } else { 0.0 };
            (x <= lo + tol && gi > 0.0) || (x >= hi - tol && gi < 0.0)
        })
        .collect()
}

fn mask(v: &[f64], keep: &[bool]) -> Vec<f64> {
    v.iter().zip(keep).map(|(x, &k)| if k { *x } else { 0.0 }).collect()
}

/// Preconditioner on the inactive set: `Z (L + μI) Z + (I − Z)`.
fn reduced_preconditioner(l: &CsrMatrix<f64>, inactive: &[bool], shift: f64) -> Result<LdlFactor<f64>> {
    let n = l.rows();
    let mean_diag = l.diag().iter().sum::<f64>() / n.max(1) as f64;
    let mu = shift * if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut t = Vec::with_capacity(l.nnz() + n);
    for r in 0..n {
        if !inactive[r] {
            t.push((r, r, 1.0));
            continue;
        }
        t.push((r, r, mu));
        for (c, v) in l.row(r) {
            if inactive[c] {
                t.push((r, c, v));
            }
        }
    }
    LdlFactor::new(&CsrMatrix::from_triplets(n, n, &t)?)
}

/// Runs projected Gauss-Newton from `m0`.
pub fn projected_gauss_newton(
    exec: &mut dyn Executor,
    reg: &dyn Regularizer,
    m0: Vec<f64>,
    bounds: Bounds,
    opts: &GnOptions,
) -> Result<GnState> {
    let n = exec.n_model();
    if m0.len() != n || bounds.lower.len() != n {
        return Err(Error::DimensionMismatch(format!("model size {n}, initial model {}, bounds {}", m0.len(), bounds.lower.len())));
    }
    if !(opts.alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be non-negative, got {}", opts.alpha)));
    }
    if !bounds.contains(&m0) {
        return Err(Error::InvalidArgument("initial model violates the bounds".into()));
    }
    let start = Instant::now();
    let mut m = m0;
    let mut eval = exec.evaluate(&m, true)?;
    let (r0, _) = reg.value_grad(&m);
    let mut state = GnState {
        model: m.clone(),
        bounds: bounds.clone(),
        iteration: 0,
        initial_objective: eval.misfit + opts.alpha * r0,
        initial_misfit: eval.misfit,
        initial_reg: r0,
        history: Vec::new(),
        active: vec![false; n],
        refs: eval.refs.clone(),
        status: GnStatus::MaxIterations,
        iterates: if opts.keep_iterates { vec![m.clone()] } else { Vec::new() },
    };
    let mut f = state.initial_objective;
    let mut pg0 = None;

    for it in 1..=opts.max_gn {
        if it > 1 {
            eval = exec.evaluate(&m, true)?;
        }
        let (_, rg) = reg.value_grad(&m);
        let mg = eval.gradient.as_ref().expect("gradient requested");
        let g: Vec<f64> = mg.iter().zip(&rg).map(|(a, b)| a + opts.alpha * b).collect();
        let active = active_set(&m, &g, &bounds, opts.active_eps);
        let inactive: Vec<bool> = active.iter().map(|a| !a).collect();
        let pg = mask(&g, &inactive);
        let pg_norm = norm(&pg);
        let pg_ref = *pg0.get_or_insert(pg_norm);
        state.active = active.clone();
        state.refs = eval.refs.clone();
        if pg_norm == 0.0 && active.iter().all(|a| !a) || pg_norm <= opts.grad_tol * pg_ref && it > 1 {
            state.status = GnStatus::Converged;
            break;
        }

        // Projected PCG on the inactive set.
        let lreg = reg.hessian(&m);
        let precond = match opts.preconditioning {
            Preconditioning::RegularizerHessian => Some(reduced_preconditioner(&lreg, &inactive, opts.precond_shift)?),
            Preconditioning::None => None,
        };
        let apply_m = |r: &[f64]| -> Result<Vec<f64>> {
            match &precond {
                Some(p) => Ok(mask(&p.solve(r)?, &inactive)),
                None => Ok(r.to_vec()),
            }
        };
        let mut x = vec![0.0; n];
        let mut r: Vec<f64> = pg.iter().map(|v| -v).collect();
        let r0n = norm(&r);
        let mut z = apply_m(&r)?;
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut pcg_iters = 0;
        while pcg_iters < opts.max_pcg && r0n > 0.0 {
            let mut hp = exec.hessian_matvec(&m, &p)?;
            let lp = lreg.spmv(&p)?;
            hp.iter_mut().zip(&lp).for_each(|(h, l)| *h += opts.alpha * l);
            let hp = mask(&hp, &inactive);
            pcg_iters += 1;
            let php = dot(&p, &hp);
            if !(php > 0.0) {
                if pcg_iters == 1 {
                    x = p.clone();
                }
                break;
            }
            let a = rz / php;
            x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += a * pi);
            r.iter_mut().zip(&hp).for_each(|(ri, hi)| *ri -= a * hi);
            if norm(&r) <= opts.pcg_tol * r0n {
                break;
            }
            z = apply_m(&r)?;
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
        }

        // Scaled steepest descent on the active set.
        let step_scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let ga_max = g.iter().zip(&active).filter(|(_, a)| **a).fold(0.0f64, |a, (v, _)| a.max(v.abs()));
        let mut dir = x;
        for i in 0..n {
            if active[i] {
                dir[i] = if step_scale > 0.0 && ga_max > 0.0 { -g[i] * step_scale / ga_max } else { -g[i] };
            }
        }
        if let Some(cap) = opts.max_step {
            let dmax = dir.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if dmax > cap {
                dir.iter_mut().for_each(|d| *d *= cap / dmax);
            }
        }

        let alpha = opts.alpha;
        let ls = projected_armijo(
            |trial| {
                let e = exec.evaluate(trial, false)?;
                Ok(e.misfit + alpha * reg.value_grad(trial).0)
            },
            &m,
            f,
            &g,
            &dir,
            &bounds.lower,
            &bounds.upper,
            opts.armijo,
        );
        let ls = match ls {
            Ok(ls) => ls,
            Err(Error::LineSearchFailure(_)) => {
                state.status = GnStatus::LineSearchFailure;
                break;
            }
            Err(e) => return Err(e),
        };
        m = project(&ls.model, &bounds.lower, &bounds.upper);
        f = ls.value;
        let rv = reg.value_grad(&m).0;
        state.model = m.clone();
        state.iteration = it;
        if opts.keep_iterates {
            state.iterates.push(m.clone());
        }
        state.history.push(IterationRecord {
            iteration: it,
            objective: f,
            misfit: f - alpha * rv,
            reg: rv,
            proj_grad_norm: pg_norm,
            pcg_iters,
            ls_steps: ls.backtracks,
            active_count: active.iter().filter(|a| **a).count(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    state.model = m;
    Ok(state)
}
