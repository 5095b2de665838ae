//! DC resistivity: `−∇·(σ∇u) = q` with insulating (Neumann) boundaries,
//! discretized as `A(σ) = Gᵀ V_f diag(σ_f) G`.
//!
//! `A` is singular with the constants as nullspace. Every source and
//! receiver is a zero-sum dipole, so systems are solved with one degree of
//! freedom pinned by a rank-one diagonal shift; the solution is then shifted
//! to zero mean.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{
    check_len, check_positive, check_reports, fingerprint, FieldPrecision, ForwardProblem, Physics, RealFields,
};
use crate::error::{Error, Result};
use crate::mesh::{face_average_operator, face_coefficient_derivative, face_coefficients, gradient_operator, Averaging, TensorMesh};
use crate::sparse::{CsrMatrix, SolverHandle, SolverSpec};

struct DcCache {
    hash: u64,
    /// `∂σ_f/∂σ`.
    face_deriv: CsrMatrix<f64>,
    pinned: CsrMatrix<f64>,
    handle: SolverHandle<f64>,
    fields: RealFields,
}

pub struct DcProblem {
    mesh: TensorMesh,
    grad: CsrMatrix<f64>,
    face_vol: Vec<f64>,
    averaging: Averaging,
    avg: CsrMatrix<f64>,
    /// One row per source (`n_q × N`).
    sources: CsrMatrix<f64>,
    /// One row per receiver (`n_p × N`).
    receivers: CsrMatrix<f64>,
    solver: SolverSpec,
    precision: FieldPrecision,
    cache: Option<Arc<DcCache>>,
    solves: Arc<AtomicU64>,
}

impl Clone for DcProblem {
    fn clone(&self) -> Self {
        Self {
            mesh: self.mesh.clone(),
            grad: self.grad.clone(),
            face_vol: self.face_vol.clone(),
            averaging: self.averaging,
            avg: self.avg.clone(),
            sources: self.sources.clone(),
            receivers: self.receivers.clone(),
            solver: self.solver,
            precision: self.precision,
            cache: self.cache.clone(),
            solves: Arc::new(AtomicU64::new(self.solves.load(Ordering::Relaxed))),
        }
    }
}

impl DcProblem {
    pub fn new(mesh: TensorMesh, sources: CsrMatrix<f64>, receivers: CsrMatrix<f64>, solver: SolverSpec) -> Result<Self> {
        solver.validate()?;
        let n = mesh.n_cells();
        for (name, m) in [("source", &sources), ("receiver", &receivers)] {
            if m.cols() != n {
                return Err(Error::DimensionMismatch(format!("{name} matrix has {} columns for {n} cells", m.cols())));
            }
            for r in 0..m.rows() {
                let s: f64 = m.row(r).map(|(_, v)| v).sum();
                let scale: f64 = m.row(r).map(|(_, v)| v.abs()).sum();
                if s.abs() > 1e-12 * scale.max(1.0) {
                    return Err(Error::InvalidArgument(format!("{name} {r} does not sum to zero")));
                }
            }
        }
        let averaging = Averaging::default();
        Ok(Self {
            grad: gradient_operator(&mesh),
            face_vol: mesh.face_volumes(),
            avg: face_average_operator(&mesh, averaging),
            averaging,
            mesh,
            sources,
            receivers,
            solver,
            precision: FieldPrecision::Full,
            cache: None,
            solves: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn with_averaging(mut self, averaging: Averaging) -> Self {
        self.averaging = averaging;
        self.avg = face_average_operator(&self.mesh, averaging);
        self.cache = None;
        self
    }

    pub fn with_field_precision(mut self, precision: FieldPrecision) -> Self {
        self.precision = precision;
        self.cache = None;
        self
    }

    pub fn mesh(&self) -> &TensorMesh {
        &self.mesh
    }

    pub fn sources(&self) -> &CsrMatrix<f64> {
        &self.sources
    }

    pub fn receivers(&self) -> &CsrMatrix<f64> {
        &self.receivers
    }

    pub fn solver(&self) -> &SolverSpec {
        &self.solver
    }

    pub fn n_receivers(&self) -> usize {
        self.receivers.rows()
    }

    /// `A(σ) = Gᵀ V_f diag(σ_f) G`.
    pub fn assemble(&self, sigma: &[f64]) -> Result<CsrMatrix<f64>> {
        check_len("conductivity", sigma.len(), self.mesh.n_cells())?;
        check_positive("conductivity", sigma)?;
        let sf = face_coefficients(&self.avg, sigma, self.averaging);
        let w: Vec<f64> = sf.iter().zip(&self.face_vol).map(|(s, v)| s * v).collect();
        let gt = self.grad.transpose();
        gt.scale(None, Some(&w)).matmul(&self.grad)
    }

    /// Cached fields from the last forward solve, one column per source.
    pub fn fields(&self) -> Option<&RealFields> {
        self.cache.as_ref().map(|c| &c.fields)
    }

    fn cache_for(&self, sigma: &[f64]) -> Result<&DcCache> {
        match &self.cache {
            Some(c) if c.hash == fingerprint(sigma) => Ok(c),
            _ => Err(Error::StaleCache),
        }
    }

    /// Solves the pinned system for each right-hand side and removes the mean.
    fn solve_block(&self, cache: &DcCache, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let (mut x, reports) = cache.handle.solve(&cache.pinned, rhs)?;
        self.solves.fetch_add(rhs.len() as u64, Ordering::Relaxed);
        check_reports(&reports)?;
        for col in &mut x {
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            col.iter_mut().for_each(|v| *v -= mean);
        }
        Ok(x)
    }

    /// `∂(A u)/∂σ · v = Gᵀ V_f ((G u) ∘ (S v))`.
    fn dadm_times(&self, cache: &DcCache, u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let gu = self.grad.spmv(u)?;
        let sv = cache.face_deriv.spmv(v)?;
        let f: Vec<f64> = gu.iter().zip(&sv).zip(&self.face_vol).map(|((a, b), c)| a * b * c).collect();
        self.grad.spmv_t(&f)
    }

    /// Receiver data of `J v` for one source with field `u`.
    pub fn sens_matvec_field(&self, sigma: &[f64], u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cache_for(sigma)?;
        let w = self.dadm_times(cache, u, v)?;
        let z = self.solve_block(cache, &[w])?;
        Ok(self.receivers.spmv(&z[0])?.into_iter().map(|d| -d).collect())
    }

    /// Contribution of one source (field `u`, data residual `r`) to `Jᵀ r`.
    pub fn sens_tmatvec_field(&self, sigma: &[f64], u: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cache_for(sigma)?;
        let y = self.receivers.spmv_t(r)?;
        let lam = self.solve_block(cache, &[y])?;
        self.adjoint_gather(cache, &[u.to_vec()], &lam)
    }

    fn adjoint_gather(&self, cache: &DcCache, fields: &[Vec<f64>], lam: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut face = vec![0.0; self.face_vol.len()];
        for (u, l) in fields.iter().zip(lam) {
            let gu = self.grad.spmv(u)?;
            let gl = self.grad.spmv(l)?;
            for (k, f) in face.iter_mut().enumerate() {
                *f -= gu[k] * self.face_vol[k] * gl[k];
            }
        }
        cache.face_deriv.spmv_t(&face)
    }
}

impl ForwardProblem for DcProblem {
    fn physics(&self) -> Physics {
        Physics::Dc
    }

    fn n_cells(&self) -> usize {
        self.mesh.n_cells()
    }

    fn n_data(&self) -> usize {
        self.receivers.rows() * self.sources.rows()
    }

    fn n_sources(&self) -> usize {
        self.sources.rows()
    }

    fn forward(&mut self, sigma: &[f64]) -> Result<Vec<f64>> {
        let a = self.assemble(sigma)?;
        let pin = CsrMatrix::from_triplets(a.rows(), a.cols(), &[(0, 0, a.get(0, 0))])?;
        let pinned = a.add_scaled(1.0, &pin, 1.0)?;
        let handle = SolverHandle::new(self.solver, &pinned)?;
        let face_deriv = face_coefficient_derivative(&self.avg, sigma, self.averaging);
        self.cache = None;
        let rhs: Vec<Vec<f64>> = (0..self.sources.rows())
            .map(|j| {
                let mut q = vec![0.0; a.rows()];
                for (c, v) in self.sources.row(j) {
                    q[c] = v;
                }
                q
            })
            .collect();
        let mut cache = DcCache { hash: fingerprint(sigma), face_deriv, pinned, handle, fields: RealFields::Full(Vec::new()) };
        let u = self.solve_block(&cache, &rhs)?;
        let mut data = Vec::with_capacity(self.n_data());
        for col in &u {
            data.extend(self.receivers.spmv(col)?);
        }
        cache.fields = RealFields::store(u, self.precision);
        self.cache = Some(Arc::new(cache));
        Ok(data)
    }

    fn sens_matvec(&self, sigma: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cache_for(sigma)?;
        check_len("model perturbation", v.len(), self.mesh.n_cells())?;
        let rhs = (0..cache.fields.len())
            .map(|j| self.dadm_times(cache, &cache.fields.column(j), v))
            .collect::<Result<Vec<_>>>()?;
        let z = self.solve_block(cache, &rhs)?;
        let mut out = Vec::with_capacity(self.n_data());
        for col in &z {
            out.extend(self.receivers.spmv(col)?.into_iter().map(|d| -d));
        }
        Ok(out)
    }

    fn sens_tmatvec(&self, sigma: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cache_for(sigma)?;
        check_len("data vector", w.len(), self.n_data())?;
        let np = self.receivers.rows();
        let rhs = w.chunks(np).map(|r| self.receivers.spmv_t(r)).collect::<Result<Vec<_>>>()?;
        let lam = self.solve_block(cache, &rhs)?;
        let fields: Vec<Vec<f64>> = (0..cache.fields.len()).map(|j| cache.fields.column(j)).collect();
        self.adjoint_gather(cache, &fields, &lam)
    }

    fn solve_count(&self) -> u64 {
        self.solves.load(Ordering::Relaxed)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    fn setup_bytes(&self) -> usize {
        self.mesh.byte_size() + self.sources.byte_size() + self.receivers.byte_size()
    }

    fn cache_bytes(&self) -> usize {
        self.cache.as_ref().map_or(0, |c| c.fields.byte_size() + c.pinned.byte_size())
    }

    fn box_clone(&self) -> Box<dyn ForwardProblem> {
        Box::new(self.clone())
    }
}
