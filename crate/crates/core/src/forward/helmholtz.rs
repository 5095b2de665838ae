//! Frequency-domain acoustic waves:
//! `−∇·(ρ⁻¹∇u) − ω²(1+iγ) m u = q` with `m` the squared slowness and `γ`
//! an attenuation that is zero in the region of interest and ramps up in
//! padding cells to absorb outgoing waves.
//!
//! Discretized as `H(m) = Gᵀ V_f diag(1/ρ_f) G − ω² V diag((1+iγ) m)`,
//! which is complex symmetric (not Hermitian).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{
    check_len, check_positive, check_reports, fingerprint, ComplexFields, FieldPrecision, ForwardProblem, Physics,
};
use crate::error::{Error, Result};
use crate::mesh::{face_average_operator, face_coefficients, gradient_operator, Averaging, TensorMesh};
use crate::scalar::Complex64;
use crate::sparse::{CsrMatrix, SolverHandle, SolverSpec};

/// One face of the domain box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Side {
    pub axis: usize,
    pub upper: bool,
}

/// Quadratic attenuation ramp `strength · (k / pad)²` in the outer `pad`
/// cells of every side except `free_surface`; contributions of different
/// axes add up in corners.
pub fn build_attenuation_layer(
    mesh: &TensorMesh,
    pad: usize,
    strength: f64,
    free_surface: Option<Side>,
) -> Result<Vec<f64>> {
    let shape = mesh.shape();
    for (a, &n) in shape.iter().enumerate() {
        if 2 * pad >= n {
            return Err(Error::InvalidPadding(format!("{pad} padding cells on an axis of {n} cells (axis {a})")));
        }
    }
    if !(strength >= 0.0) {
        return Err(Error::InvalidPadding(format!("negative attenuation strength {strength}")));
    }
    let mut gamma = vec![0.0; mesh.n_cells()];
    if pad == 0 {
        return Ok(gamma);
    }
    for (i, g) in gamma.iter_mut().enumerate() {
        let sub = mesh.cell_sub(i);
        for (a, &n) in shape.iter().enumerate() {
            let lower_depth = pad.saturating_sub(sub[a]);
            let upper_depth = (sub[a] + pad + 1).saturating_sub(n);
            let skip = |upper: bool| free_surface == Some(Side { axis: a, upper });
            for (depth, upper) in [(lower_depth, false), (upper_depth, true)] {
                if depth > 0 && !skip(upper) {
                    let t = depth as f64 / pad as f64;
                    *g += strength * t * t;
                }
            }
        }
    }
    Ok(gamma)
}

struct HelmholtzCache {
    hash: u64,
    op: CsrMatrix<Complex64>,
    handle: SolverHandle<Complex64>,
    fields: ComplexFields,
}

pub struct HelmholtzProblem {
    mesh: TensorMesh,
    stiffness: CsrMatrix<f64>,
    vol: Vec<f64>,
    gamma: Vec<f64>,
    omega: f64,
    sources: CsrMatrix<f64>,
    receivers: CsrMatrix<f64>,
    solver: SolverSpec,
    precision: FieldPrecision,
    cache: Option<Arc<HelmholtzCache>>,
    solves: Arc<AtomicU64>,
}

impl Clone for HelmholtzProblem {
    fn clone(&self) -> Self {
        Self {
            mesh: self.mesh.clone(),
            stiffness: self.stiffness.clone(),
            vol: self.vol.clone(),
            gamma: self.gamma.clone(),
            omega: self.omega,
            sources: self.sources.clone(),
            receivers: self.receivers.clone(),
            solver: self.solver,
            precision: self.precision,
            cache: self.cache.clone(),
            solves: Arc::new(AtomicU64::new(self.solves.load(Ordering::Relaxed))),
        }
    }
}

impl HelmholtzProblem {
    /// `sources` and `receivers` have one row per source/receiver.
    pub fn new(
        mesh: TensorMesh,
        rho: &[f64],
        gamma: Vec<f64>,
        omega: f64,
        sources: CsrMatrix<f64>,
        receivers: CsrMatrix<f64>,
        solver: SolverSpec,
    ) -> Result<Self> {
        solver.validate()?;
        let n = mesh.n_cells();
        check_len("density", rho.len(), n)?;
        check_len("attenuation", gamma.len(), n)?;
        check_positive("density", rho)?;
        if let Some(g) = gamma.iter().find(|g| !(**g >= 0.0)) {
            return Err(Error::InvalidCoefficient(format!("negative attenuation {g}")));
        }
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(Error::InvalidArgument(format!("angular frequency must be positive, got {omega}")));
        }
        if sources.cols() != n || receivers.cols() != n {
            return Err(Error::DimensionMismatch("source/receiver matrices must have one column per cell".into()));
        }
        let grad = gradient_operator(&mesh);
        let avg = face_average_operator(&mesh, Averaging::Harmonic);
        let b: Vec<f64> = rho.iter().map(|r| 1.0 / r).collect();
        let bf = face_coefficients(&avg, &b, Averaging::Harmonic);
        let w: Vec<f64> = bf.iter().zip(mesh.face_volumes()).map(|(b, v)| b * v).collect();
        let stiffness = grad.transpose().scale(None, Some(&w)).matmul(&grad)?;
        Ok(Self {
            vol: mesh.cell_volumes(),
            mesh,
            stiffness,
            gamma,
            omega,
            sources,
            receivers,
            solver,
            precision: FieldPrecision::Full,
            cache: None,
            solves: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn with_field_precision(mut self, precision: FieldPrecision) -> Self {
        self.precision = precision;
        self.cache = None;
        self
    }

    pub fn mesh(&self) -> &TensorMesh {
        &self.mesh
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn sources(&self) -> &CsrMatrix<f64> {
        &self.sources
    }

    pub fn receivers(&self) -> &CsrMatrix<f64> {
        &self.receivers
    }

    pub fn fields(&self) -> Option<&ComplexFields> {
        self.cache.as_ref().map(|c| &c.fields)
    }

    pub fn assemble(&self, m: &[f64]) -> Result<CsrMatrix<Complex64>> {
        check_len("squared slowness", m.len(), self.mesh.n_cells())?;
        check_positive("squared slowness", m)?;
        let w2 = self.omega * self.omega;
        let mass: Vec<Complex64> = (0..m.len())
            .map(|i| Complex64::new(1.0, self.gamma[i]) * (w2 * self.vol[i] * m[i]))
            .collect();
        let k = self.stiffness.map(|v| Complex64::new(v, 0.0));
        k.add_scaled(Complex64::new(1.0, 0.0), &CsrMatrix::diagonal(&mass), Complex64::new(-1.0, 0.0))
    }

    /// Complex receiver data `P u_j` for every source, in source order.
    pub fn complex_data(&self) -> Option<Vec<Vec<Complex64>>> {
        let c = self.cache.as_ref()?;
        Some((0..c.fields.len()).map(|j| self.sample(&c.fields.column(j))).collect())
    }

    fn sample(&self, u: &[Complex64]) -> Vec<Complex64> {
        (0..self.receivers.rows())
            .map(|r| self.receivers.row(r).map(|(c, v)| u[c] * v).sum())
            .collect()
    }

    fn spread(&self, r: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![Complex64::new(0.0, 0.0); self.mesh.n_cells()];
        for (i, &ri) in r.iter().enumerate() {
            for (c, v) in self.receivers.row(i) {
                y[c] += ri * v;
            }
        }
        y
    }

    fn cache_for(&self, m: &[f64]) -> Result<&HelmholtzCache> {
        match &self.cache {
            Some(c) if c.hash == fingerprint(m) => Ok(c),
            _ => Err(Error::StaleCache),
        }
    }

    fn solve_block(&self, cache: &HelmholtzCache, rhs: &[Vec<Complex64>]) -> Result<Vec<Vec<Complex64>>> {
        let (x, reports) = cache.handle.solve(&cache.op, rhs)?;
        self.solves.fetch_add(rhs.len() as u64, Ordering::Relaxed);
        check_reports(&reports)?;
        Ok(x)
    }

    /// `ω² V (1+iγ) ∘ u`, the derivative of `−H(m) u` with respect to `m`.
    fn mass_weight(&self, u: &[Complex64]) -> Vec<Complex64> {
        let w2 = self.omega * self.omega;
        u.iter()
            .enumerate()
            .map(|(i, &ui)| ui * Complex64::new(1.0, self.gamma[i]) * (w2 * self.vol[i]))
            .collect()
    }

    /// Forward solves for a subset of sources with the cached operator.
    pub fn solve_sources(&self, m: &[f64], sources: &[usize]) -> Result<Vec<Vec<Complex64>>> {
        let cache = self.cache_for(m)?;
        let rhs: Vec<Vec<Complex64>> = sources.iter().map(|&j| self.source_vector(j)).collect();
        self.solve_block(cache, &rhs)
    }

    fn source_vector(&self, j: usize) -> Vec<Complex64> {
        let mut q = vec![Complex64::new(0.0, 0.0); self.mesh.n_cells()];
        for (c, v) in self.sources.row(j) {
            q[c] = Complex64::new(v, 0.0);
        }
        q
    }

    /// Interleaved data of `J v` for one source with field `u`.
    pub fn sens_matvec_field(&self, m: &[f64], u: &[Complex64], v: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cache_for(m)?;
        let rhs: Vec<Complex64> = self.mass_weight(u).iter().zip(v).map(|(c, &vi)| c * vi).collect();
        let z = self.solve_block(cache, &[rhs])?;
        Ok(interleave(&self.sample(&z[0])))
    }

    /// Contribution of one source (field `u`, interleaved residual `r`) to `Jᵀ r`.
    pub fn sens_tmatvec_field(&self, m: &[f64], u: &[Complex64], r: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cache_for(m)?;
        let y = self.spread(&deinterleave_conj(r));
        let lam = self.solve_block(cache, &[y])?;
        Ok(self.mass_weight(u).iter().zip(&lam[0]).map(|(c, l)| (c * l).re).collect())
    }
}

fn interleave(z: &[Complex64]) -> Vec<f64> {
    z.iter().flat_map(|c| [c.re, c.im]).collect()
}

fn deinterleave_conj(r: &[f64]) -> Vec<Complex64> {
    r.chunks(2).map(|p| Complex64::new(p[0], -p[1])).collect()
}

impl ForwardProblem for HelmholtzProblem {
    fn physics(&self) -> Physics {
        Physics::Helmholtz
    }

    fn frequency(&self) -> Option<f64> {
        Some(self.omega)
    }

    fn n_cells(&self) -> usize {
        self.mesh.n_cells()
    }

    fn n_data(&self) -> usize {
        2 * self.receivers.rows() * self.sources.rows()
    }

    fn n_sources(&self) -> usize {
        self.sources.rows()
    }

    fn forward(&mut self, m: &[f64]) -> Result<Vec<f64>> {
        let op = self.assemble(m)?;
        let handle = SolverHandle::new(self.solver, &op)?;
        self.cache = None;
        let mut cache = HelmholtzCache { hash: fingerprint(m), op, handle, fields: ComplexFields::Full(Vec::new()) };
        let rhs: Vec<Vec<Complex64>> = (0..self.sources.rows()).map(|j| self.source_vector(j)).collect();
        let u = self.solve_block(&cache, &rhs)?;
        let mut data = Vec::with_capacity(self.n_data());
        for col in &u {
            data.extend(interleave(&self.sample(col)));
        }
        cache.fields = ComplexFields::store(u, self.precision);
        self.cache = Some(Arc::new(cache));
        Ok(data)
    }

    fn sens_matvec(&self, m: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cache_for(m)?;
        check_len("model perturbation", v.len(), self.mesh.n_cells())?;
        let rhs: Vec<Vec<Complex64>> = (0..cache.fields.len())
            .map(|j| self.mass_weight(&cache.fields.column(j)).iter().zip(v).map(|(c, &vi)| c * vi).collect())
            .collect();
        let z = self.solve_block(cache, &rhs)?;
        Ok(z.iter().flat_map(|col| interleave(&self.sample(col))).collect())
    }

    fn sens_tmatvec(&self, m: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cache_for(m)?;
        check_len("data vector", w.len(), self.n_data())?;
        let np2 = 2 * self.receivers.rows();
        let rhs: Vec<Vec<Complex64>> = w.chunks(np2).map(|r| self.spread(&deinterleave_conj(r))).collect();
        let lam = self.solve_block(cache, &rhs)?;
        let mut out = vec![0.0; self.mesh.n_cells()];
        for (j, l) in lam.iter().enumerate() {
            let c = self.mass_weight(&cache.fields.column(j));
            for (o, (ci, li)) in out.iter_mut().zip(c.iter().zip(l)) {
                *o += (ci * li).re;
            }
        }
        Ok(out)
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
        self.mesh.byte_size()
            + self.stiffness.byte_size()
            + 8 * (self.vol.len() + self.gamma.len())
            + self.sources.byte_size()
            + self.receivers.byte_size()
    }

    fn cache_bytes(&self) -> usize {
        self.cache.as_ref().map_or(0, |c| c.fields.byte_size() + c.op.byte_size())
    }

    fn box_clone(&self) -> Box<dyn ForwardProblem> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::point_matrix;
    use crate::sparse::SolverKind;

    fn strip(n: usize, h: f64) -> TensorMesh {
        TensorMesh::uniform(&[n, 1], &[h, h]).unwrap()
    }

    fn small_problem(gamma_strength: f64) -> (HelmholtzProblem, Vec<f64>) {
        let mesh = TensorMesh::uniform(&[12, 8], &[0.1, 0.1]).unwrap();
        let n = mesh.n_cells();
        let gamma = build_attenuation_layer(&mesh, 2, gamma_strength, Some(Side { axis: 1, upper: false })).unwrap();
        let src = point_matrix(&mesh, &[vec![0.35, 0.05], vec![0.85, 0.05]]).unwrap();
        let rec = point_matrix(&mesh, &[vec![0.25, 0.45], vec![0.55, 0.35], vec![0.95, 0.55]]).unwrap();
        let p = HelmholtzProblem::new(mesh, &vec![1.0; n], gamma, 2.0 * std::f64::consts::PI * 1.5, src, rec, SolverSpec::direct())
            .unwrap();
        let m: Vec<f64> = (0..n).map(|k| 0.3 + 0.05 * ((k as f64) * 0.37).sin()).collect();
        (p, m)
    }

    #[test]
    fn zero_padding_gives_zero_attenuation() {
        let mesh = TensorMesh::uniform(&[10, 6], &[1.0, 1.0]).unwrap();
        assert!(build_attenuation_layer(&mesh, 0, 5.0, None).unwrap().iter().all(|&g| g == 0.0));
        assert!(matches!(build_attenuation_layer(&mesh, 3, 1.0, None), Err(Error::InvalidPadding(_))));
    }

    #[test]
    fn padding_ten_on_wide_axis() {
        let mesh = TensorMesh::uniform(&[165, 30], &[1.0, 1.0]).unwrap();
        let top = Side { axis: 1, upper: false };
        let g = build_attenuation_layer(&mesh, 10, 1.0, Some(top)).unwrap();
        let row = 15;
        for i in 0..165 {
            let v = g[mesh.cell_index(&[i, row])];
            assert_eq!(v > 0.0, !(10..155).contains(&i), "cell {i}");
        }
        // Free surface at y = 0 carries no ramp; the bottom does.
        assert_eq!(g[mesh.cell_index(&[80, 0])], 0.0);
        assert!(g[mesh.cell_index(&[80, 29])] > 0.0);
        // Monotone along the ramp.
        for i in 0..10 {
            assert!(g[mesh.cell_index(&[i, row])] > g[mesh.cell_index(&[i + 1, row])]);
            assert!(g[mesh.cell_index(&[164 - i, row])] > g[mesh.cell_index(&[163 - i, row])]);
        }
    }

    #[test]
    fn zero_attenuation_gives_real_operator() {
        let (p, m) = small_problem(0.0);
        let h = p.assemble(&m).unwrap();
        assert!(h.data().iter().all(|z| z.im == 0.0));
        let (q, _) = small_problem(1.0);
        let hq = q.assemble(&m).unwrap();
        assert!(hq.data().iter().any(|z| z.im != 0.0));
        assert_eq!(hq.asymmetry(), 0.0);
    }

    #[test]
    fn low_frequency_limit_is_the_laplacian() {
        let mesh = TensorMesh::uniform(&[5, 4], &[1.0, 1.0]).unwrap();
        let n = mesh.n_cells();
        let p = HelmholtzProblem::new(
            mesh,
            &vec![2.0; n],
            vec![0.0; n],
            1e-9,
            CsrMatrix::zeros(0, n),
            CsrMatrix::zeros(0, n),
            SolverSpec::direct(),
        )
        .unwrap();
        let h = p.assemble(&vec![1.0; n]).unwrap();
        let ones: Vec<Complex64> = vec![Complex64::new(1.0, 0.0); n];
        assert!(h.spmv(&ones).unwrap().iter().all(|z| z.norm() < 1e-15));
        // Interior cell: four neighbors with face coefficient 1/2.
        let c = 1 + 5;
        assert!((h.get(c, c).re - 2.0).abs() < 1e-12);
        assert!((h.get(c, c + 1).re + 0.5).abs() < 1e-15);
    }

    #[test]
    fn discrete_plane_wave_satisfies_stencil_dispersion() {
        let (n, h) = (40, 0.5);
        let kh: f64 = 0.3;
        let m = 0.25;
        let omega = ((2.0 - 2.0 * kh.cos()) / (h * h) / m).sqrt();
        let mesh = strip(n, h);
        let p = HelmholtzProblem::new(
            mesh.clone(),
            &vec![1.0; n],
            vec![0.0; n],
            omega,
            CsrMatrix::zeros(0, n),
            CsrMatrix::zeros(0, n),
            SolverSpec::direct(),
        )
        .unwrap();
        let op = p.assemble(&vec![m; n]).unwrap();
        let u: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(1.0, kh * i as f64)).collect();
        let r = op.spmv(&u).unwrap();
        for (i, ri) in r.iter().enumerate().take(n - 1).skip(1) {
            assert!(ri.norm() < 1e-12, "row {i}: {ri}");
        }
    }

    #[test]
    fn reciprocity() {
        let mesh = TensorMesh::uniform(&[16, 10], &[0.1, 0.1]).unwrap();
        let n = mesh.n_cells();
        let gamma = build_attenuation_layer(&mesh, 3, 2.0, None).unwrap();
        let (a, b) = (vec![0.45, 0.45], vec![1.25, 0.65]);
        let mk = |s: &Vec<f64>, r: &Vec<f64>| {
            HelmholtzProblem::new(
                mesh.clone(),
                &vec![1.0; n],
                gamma.clone(),
                9.0,
                point_matrix(&mesh, std::slice::from_ref(s)).unwrap(),
                point_matrix(&mesh, std::slice::from_ref(r)).unwrap(),
                SolverSpec::direct(),
            )
            .unwrap()
        };
        let m = vec![0.5; n];
        let d1 = mk(&a, &b).forward(&m).unwrap();
        let d2 = mk(&b, &a).forward(&m).unwrap();
        assert!((d1[0] - d2[0]).abs() < 1e-12 && (d1[1] - d2[1]).abs() < 1e-12);
    }

    #[test]
    fn batched_sources_are_bitwise_identical() {
        let (mut p, m) = small_problem(1.0);
        let all = p.forward(&m).unwrap();
        let u0 = p.solve_sources(&m, &[0]).unwrap();
        let u1 = p.solve_sources(&m, &[1]).unwrap();
        let d: Vec<f64> = [u0, u1].iter().flat_map(|u| interleave(&p.sample(&u[0]))).collect();
        assert_eq!(all, d);
    }

    #[test]
    fn adjoint_identity_and_zero_inputs() {
        let (mut p, m) = small_problem(1.0);
        p.forward(&m).unwrap();
        let n = m.len();
        assert!(p.sens_matvec(&m, &vec![0.0; n]).unwrap().iter().all(|&v| v == 0.0));
        assert!(p.sens_tmatvec(&m, &vec![0.0; p.n_data()]).unwrap().iter().all(|&v| v == 0.0));
        for s in 0..5 {
            let v: Vec<f64> = (0..n).map(|k| ((k * 13 + s) as f64).sin()).collect();
            let w: Vec<f64> = (0..p.n_data()).map(|k| ((k * 7 + 3 * s) as f64).cos()).collect();
            let jv = p.sens_matvec(&m, &v).unwrap();
            let jtw = p.sens_tmatvec(&m, &w).unwrap();
            let a: f64 = jv.iter().zip(&w).map(|(x, y)| x * y).sum();
            let b: f64 = v.iter().zip(&jtw).map(|(x, y)| x * y).sum();
            assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()));
        }
    }

    #[test]
    fn bicgstab_matches_direct() {
        let (mut p, m) = small_problem(1.0);
        let d = p.forward(&m).unwrap();
        let mut q = p.clone();
        q.solver = SolverSpec::iterative(SolverKind::Bicgstab, 1e-12, 5000);
        let di = q.forward(&m).unwrap();
        for (a, b) in d.iter().zip(&di) {
            assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
        }
        q.solver = SolverSpec::iterative(SolverKind::Cg, 1e-12, 10);
        assert!(matches!(q.forward(&m), Err(Error::InvalidSolver(_))));
    }
}
