//! Krylov solvers (PCG, BiCGSTAB, block PCG) and the solver handle that
//! unifies them with the direct factorization.
//!
//! Convergence is measured by the relative residual `‖b − Ax‖ / ‖b‖` of the
//! recursively updated residual.

use rayon::prelude::*;

use super::ldl::LdlFactor;
use super::precond::{make_preconditioner, Preconditioner, PreconditionerKind};
use super::CsrMatrix;
use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, norm2, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Direct,
    Cg,
    PcgJacobi,
    PcgSsor,
    Bicgstab,
    BlockPcg,
}

impl SolverKind {
    fn is_cg_family(self) -> bool {
        matches!(self, Self::Cg | Self::PcgJacobi | Self::PcgSsor | Self::BlockPcg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSpec {
    pub kind: SolverKind,
    pub tol: f64,
    pub max_iter: usize,
    /// SSOR relaxation, also used as BiCGSTAB/block-PCG preconditioner
    /// selector (SSOR when in `(0, 2)`, Jacobi otherwise).
    pub omega: f64,
}

impl SolverSpec {
    pub fn direct() -> Self {
        Self { kind: SolverKind::Direct, tol: 1e-12, max_iter: 1, omega: 1.0 }
    }

    pub fn iterative(kind: SolverKind, tol: f64, max_iter: usize) -> Self {
        Self { kind, tol, max_iter, omega: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidSolver(format!("tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidSolver("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self::direct()
    }
}

/// Per-column outcome of a solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Conjugate gradients with preconditioner `M⁻¹`.
pub fn pcg<T: Scalar>(
    a: &CsrMatrix<T>,
    b: &[T],
    precond: &dyn Preconditioner<T>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<T>, SolveReport)> {
    let n = b.len();
    check_square(a, n)?;
    let bnorm = norm2(b);
    let mut x = vec![T::zero(); n];
    if bnorm == 0.0 {
        return Ok((x, SolveReport { iterations: 0, relative_residual: 0.0, converged: true }));
    }
    let mut r = b.to_vec();
    let mut z = vec![T::zero(); n];
    precond.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![T::zero(); n];
    let mut rel = 1.0;
    for it in 1..=max_iter {
        a.spmv_into(&p, &mut q);
        let pq = dot(&p, &q);
        if pq.abs() == 0.0 {
            return Err(Error::Breakdown { method: "PCG", iterations: it });
        }
        let alpha = rz / pq;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &q, &mut r);
        rel = norm2(&r) / bnorm;
        if rel <= tol {
            return Ok((x, SolveReport { iterations: it, relative_residual: rel, converged: true }));
        }
        precond.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, &zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    Ok((x, SolveReport { iterations: max_iter, relative_residual: rel, converged: false }))
}

/// Right-preconditioned BiCGSTAB. Works for complex non-Hermitian systems.
pub fn bicgstab<T: Scalar>(
    a: &CsrMatrix<T>,
    b: &[T],
    precond: &dyn Preconditioner<T>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<T>, SolveReport)> {
    let n = b.len();
    check_square(a, n)?;
    let bnorm = norm2(b);
    let mut x = vec![T::zero(); n];
    if bnorm == 0.0 {
        return Ok((x, SolveReport { iterations: 0, relative_residual: 0.0, converged: true }));
    }
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let mut rho = T::one();
    let mut alpha = T::one();
    let mut omega = T::one();
    let mut v = vec![T::zero(); n];
    let mut p = vec![T::zero(); n];
    let mut p_hat = vec![T::zero(); n];
    let mut s_hat = vec![T::zero(); n];
    let mut t = vec![T::zero(); n];
    let tiny = f64::EPSILON * f64::EPSILON;
    let mut rel = 1.0;
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() <= tiny * bnorm * bnorm {
            return Err(Error::Breakdown { method: "BiCGSTAB", iterations: it });
        }
        if it == 1 {
            p.copy_from_slice(&r);
        } else {
            let beta = (rho_new / rho) * (alpha / omega);
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
        }
        rho = rho_new;
        precond.apply(&p, &mut p_hat);
        a.spmv_into(&p_hat, &mut v);
        let rv = dot(&r_hat, &v);
        if rv.abs() == 0.0 {
            return Err(Error::Breakdown { method: "BiCGSTAB", iterations: it });
        }
        alpha = rho / rv;
        axpy(alpha, &p_hat, &mut x);
        axpy(-alpha, &v, &mut r);
        rel = norm2(&r) / bnorm;
        if rel <= tol {
            return Ok((x, SolveReport { iterations: it, relative_residual: rel, converged: true }));
        }
        precond.apply(&r, &mut s_hat);
        a.spmv_into(&s_hat, &mut t);
        let tt = dot(&t, &t);
        if tt.abs() == 0.0 {
            return Err(Error::Breakdown { method: "BiCGSTAB", iterations: it });
        }
        omega = dot(&t, &r) / tt;
        axpy(omega, &s_hat, &mut x);
        axpy(-omega, &t, &mut r);
        rel = norm2(&r) / bnorm;
        if rel <= tol {
            return Ok((x, SolveReport { iterations: it, relative_residual: rel, converged: true }));
        }
        if omega.abs() == 0.0 {
            return Err(Error::Breakdown { method: "BiCGSTAB", iterations: it });
        }
    }
    Ok((x, SolveReport { iterations: max_iter, relative_residual: rel, converged: false }))
}

/// Block preconditioned conjugate gradients (O'Leary). All columns share one
/// Krylov iteration; converged columns leave the active block.
pub fn block_pcg<T: Scalar>(
    a: &CsrMatrix<T>,
    rhs: &[Vec<T>],
    precond: &dyn Preconditioner<T>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<Vec<T>>, Vec<SolveReport>)> {
    let ncols = rhs.len();
    let mut x: Vec<Vec<T>> = Vec::with_capacity(ncols);
    let mut reports = vec![SolveReport { iterations: 0, relative_residual: 0.0, converged: true }; ncols];
    let bnorms: Vec<f64> = rhs.iter().map(|b| norm2(b)).collect();
    for b in rhs {
        check_square(a, b.len())?;
        x.push(vec![T::zero(); b.len()]);
    }
    // Active columns (original indices); zero right-hand sides are done.
    let mut active: Vec<usize> = (0..ncols).filter(|&j| bnorms[j] > 0.0).collect();
    if active.is_empty() {
        return Ok((x, reports));
    }
    let mut r: Vec<Vec<T>> = active.iter().map(|&j| rhs[j].clone()).collect();
    let z: Vec<Vec<T>> = r.iter().map(|rj| apply_precond(precond, rj)).collect();
    let mut p = z.clone();
    let mut zr = gram(&z, &r);

    for it in 1..=max_iter {
        let q = a.spmm(&p)?;
        let pq = gram(&p, &q);
        let alpha = solve_small(&pq, &zr).ok_or(Error::Breakdown { method: "block PCG", iterations: it })?;
        let s = active.len();
        for (jl, &jg) in active.iter().enumerate() {
            for kl in 0..s {
                let c = alpha[kl][jl];
                axpy(c, &p[kl], &mut x[jg]);
                axpy(-c, &q[kl], &mut r[jl]);
            }
        }
        let mut keep = Vec::with_capacity(s);
        for (jl, &jg) in active.iter().enumerate() {
            let rel = norm2(&r[jl]) / bnorms[jg];
            reports[jg] = SolveReport { iterations: it, relative_residual: rel, converged: rel <= tol };
            if rel > tol {
                keep.push(jl);
            }
        }
        if keep.is_empty() {
            return Ok((x, reports));
        }
        if keep.len() < s {
            active = keep.iter().map(|&jl| active[jl]).collect();
            r = keep.iter().map(|&jl| std::mem::take(&mut r[jl])).collect();
            p = keep.iter().map(|&jl| std::mem::take(&mut p[jl])).collect();
            zr = keep.iter().map(|&a| keep.iter().map(|&b| zr[a][b]).collect()).collect();
        }
        let z_new: Vec<Vec<T>> = r.par_iter().map(|rj| apply_precond(precond, rj)).collect();
        let zr_new = gram(&z_new, &r);
        let beta = solve_small(&zr, &zr_new).ok_or(Error::Breakdown { method: "block PCG", iterations: it })?;
        let s = active.len();
        let mut p_new = z_new.clone();
        for (jl, pj) in p_new.iter_mut().enumerate() {
            for kl in 0..s {
                axpy(beta[kl][jl], &p[kl], pj);
            }
        }
        p = p_new;
        zr = zr_new;
    }
    Ok((x, reports))
}

fn apply_precond<T: Scalar>(m: &dyn Preconditioner<T>, r: &[T]) -> Vec<T> {
    let mut z = vec![T::zero(); r.len()];
    m.apply(r, &mut z);
    z
}

/// `G[k][j] = <u_k, v_j>`
fn gram<T: Scalar>(u: &[Vec<T>], v: &[Vec<T>]) -> Vec<Vec<T>> {
    u.iter().map(|uk| v.iter().map(|vj| dot(uk, vj)).collect()).collect()
}

/// Solves the small dense system `G X = B` by Gaussian elimination with
/// partial pivoting; `None` when `G` is numerically singular.
fn solve_small<T: Scalar>(g: &[Vec<T>], b: &[Vec<T>]) -> Option<Vec<Vec<T>>> {
    let s = g.len();
    let mut m: Vec<Vec<T>> = g.to_vec();
    let mut x: Vec<Vec<T>> = b.to_vec();
    let scale = g.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for col in 0..s {
        let piv = (col..s).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() <= 1e-14 * scale {
            return None;
        }
        m.swap(col, piv);
        x.swap(col, piv);
        for row in col + 1..s {
            let f = m[row][col] / m[col][col];
            for k in col..s {
                let t = m[col][k];
                m[row][k] -= f * t;
            }
            for k in 0..x[row].len() {
                let t = x[col][k];
                x[row][k] -= f * t;
            }
        }
    }
    for col in (0..s).rev() {
        for k in 0..x[col].len() {
            let mut acc = x[col][k];
            for j in col + 1..s {
                acc -= m[col][j] * x[j][k];
            }
            x[col][k] = acc / m[col][col];
        }
    }
    Some(x)
}

fn check_square<T: Scalar>(a: &CsrMatrix<T>, n: usize) -> Result<()> {
    if a.rows() != a.cols() || a.rows() != n {
        return Err(Error::DimensionMismatch(format!(
            "solver: {}x{} matrix with rhs of length {}",
            a.rows(),
            a.cols(),
            n
        )));
    }
    Ok(())
}

enum HandleState<T> {
    Direct(LdlFactor<T>),
    Iterative(Box<dyn Preconditioner<T>>),
}

/// A solver bound to one operator: either a cached factorization or a
/// cached preconditioner. Immutable after construction.
pub struct SolverHandle<T> {
    spec: SolverSpec,
    state: HandleState<T>,
}

impl<T: Scalar> SolverHandle<T> {
    pub fn new(spec: SolverSpec, a: &CsrMatrix<T>) -> Result<Self> {
        spec.validate()?;
        if T::IS_COMPLEX && spec.kind.is_cg_family() {
            return Err(Error::InvalidSolver(
                "conjugate gradients require a Hermitian operator; use BiCGSTAB or the direct solver".into(),
            ));
        }
        let state = match spec.kind {
            SolverKind::Direct => HandleState::Direct(LdlFactor::new(a)?),
            SolverKind::Cg => HandleState::Iterative(make_preconditioner(a, PreconditionerKind::Identity, 1.0)?),
            SolverKind::PcgJacobi => HandleState::Iterative(make_preconditioner(a, PreconditionerKind::Jacobi, 1.0)?),
            SolverKind::PcgSsor | SolverKind::Bicgstab | SolverKind::BlockPcg => {
                let kind = if spec.omega > 0.0 && spec.omega < 2.0 {
                    PreconditionerKind::Ssor
                } else {
                    PreconditionerKind::Jacobi
                };
                HandleState::Iterative(make_preconditioner(a, kind, spec.omega)?)
            }
        };
        Ok(Self { spec, state })
    }

    pub fn spec(&self) -> &SolverSpec {
        &self.spec
    }

    pub fn is_direct(&self) -> bool {
        matches!(self.state, HandleState::Direct(_))
    }

    /// Solves `A X = B`. Non-convergence is reported per column, not raised.
    pub fn solve(&self, a: &CsrMatrix<T>, rhs: &[Vec<T>]) -> Result<(Vec<Vec<T>>, Vec<SolveReport>)> {
        match &self.state {
            HandleState::Direct(f) => {
                let x = f.solve_many(rhs)?;
                let reports = rhs
                    .iter()
                    .zip(&x)
                    .map(|(b, xj)| {
                        let r = a.spmv(xj).map(|ax| residual(&ax, b)).unwrap_or(f64::INFINITY);
                        SolveReport { iterations: 1, relative_residual: r, converged: true }
                    })
                    .collect();
                Ok((x, reports))
            }
            HandleState::Iterative(m) => {
                let (tol, it) = (self.spec.tol, self.spec.max_iter);
                match self.spec.kind {
                    SolverKind::BlockPcg => block_pcg(a, rhs, m.as_ref(), tol, it),
                    SolverKind::Bicgstab => unzip(rhs.par_iter().map(|b| bicgstab(a, b, m.as_ref(), tol, it)).collect()),
                    _ => unzip(rhs.par_iter().map(|b| pcg(a, b, m.as_ref(), tol, it)).collect()),
                }
            }
        }
    }

    pub fn solve_one(&self, a: &CsrMatrix<T>, b: &[T]) -> Result<(Vec<T>, SolveReport)> {
        let (mut x, mut r) = self.solve(a, std::slice::from_ref(&b.to_vec()))?;
        Ok((x.pop().unwrap(), r.pop().unwrap()))
    }
}

fn residual<T: Scalar>(ax: &[T], b: &[T]) -> f64 {
    let bn = norm2(b);
    let rn = ax.iter().zip(b).map(|(&u, &v)| (u - v).abs_sq()).sum::<f64>().sqrt();
    if bn == 0.0 {
        rn
    } else {
        rn / bn
    }
}

type Solved<T> = (Vec<Vec<T>>, Vec<SolveReport>);

fn unzip<T>(cols: Result<Vec<(Vec<T>, SolveReport)>>) -> Result<Solved<T>> {
    Ok(cols?.into_iter().unzip())
}

/// Factors an SPD matrix with sparse Cholesky (`LDLᵀ`) for repeated solves.
pub fn factorize_spd(a: &CsrMatrix<f64>) -> Result<SolverHandle<f64>> {
    SolverHandle::new(SolverSpec::direct(), a)
}

/// Solves `A X = B` with the solver bound to `handle`.
pub fn krylov_solve<T: Scalar>(
    handle: &SolverHandle<T>,
    a: &CsrMatrix<T>,
    rhs: &[Vec<T>],
) -> Result<(Vec<Vec<T>>, Vec<SolveReport>)> {
    handle.solve(a, rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Complex64;

    fn lap1d(n: usize) -> CsrMatrix<f64> {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, n, &t).unwrap()
    }

    #[test]
    fn identity_converges_in_one_iteration() {
        let a = CsrMatrix::<f64>::identity(5);
        let b = vec![vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![0.0, 1.0, 0.0, -1.0, 2.0]];
        for kind in [SolverKind::Cg, SolverKind::PcgJacobi, SolverKind::PcgSsor, SolverKind::Bicgstab, SolverKind::BlockPcg] {
            let h = SolverHandle::new(SolverSpec::iterative(kind, 1e-12, 10), &a).unwrap();
            let (x, rep) = h.solve(&a, &b).unwrap();
            assert_eq!(x, b, "{kind:?}");
            assert!(rep.iter().all(|r| r.iterations == 1 && r.converged), "{kind:?} {rep:?}");
        }
    }

    #[test]
    fn non_convergence_is_reported_not_raised() {
        let a = lap1d(50);
        let h = SolverHandle::new(SolverSpec::iterative(SolverKind::Cg, 1e-14, 3), &a).unwrap();
        let (_, rep) = h.solve_one(&a, &vec![1.0; 50]).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 3);
    }

    #[test]
    fn cg_refused_for_complex() {
        let a = CsrMatrix::<Complex64>::identity(3);
        let err = SolverHandle::new(SolverSpec::iterative(SolverKind::Cg, 1e-8, 10), &a);
        assert!(matches!(err, Err(Error::InvalidSolver(_))));
        assert!(SolverHandle::new(SolverSpec::iterative(SolverKind::Bicgstab, 1e-8, 10), &a).is_ok());
    }

    #[test]
    fn invalid_spec_rejected() {
        let a = CsrMatrix::<f64>::identity(2);
        assert!(SolverHandle::new(SolverSpec::iterative(SolverKind::Cg, 0.0, 10), &a).is_err());
        assert!(SolverHandle::new(SolverSpec::iterative(SolverKind::Cg, 1e-6, 0), &a).is_err());
    }

    #[test]
    fn block_pcg_dependent_columns_break_down() {
        let a = lap1d(20);
        let b = vec![1.0; 20];
        let h = SolverHandle::new(SolverSpec::iterative(SolverKind::BlockPcg, 1e-10, 100), &a).unwrap();
        let err = h.solve(&a, &[b.clone(), b]).unwrap_err();
        assert!(matches!(err, Error::Breakdown { .. }));
    }

    #[test]
    fn small_dense_solve() {
        let g = vec![vec![0.0, 2.0], vec![1.0, 1.0]];
        let b = vec![vec![4.0], vec![3.0]];
        let x = solve_small(&g, &b).unwrap();
        assert!((x[0][0] - 1.0).abs() < 1e-15 && (x[1][0] - 2.0).abs() < 1e-15);
        assert!(solve_small(&[vec![1.0, 1.0], vec![1.0, 1.0]], &b).is_none());
    }
}
