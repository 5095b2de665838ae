//! First-arrival travel times `|∇u|² = m`, `u(x_s) = 0`, solved with the fast
//! marching method on cell centers using the first-order Godunov upwind
//! stencil.
//!
//! Every accepted cell depends only on neighbors accepted before it, so the
//! linearized equations are triangular in acceptance order: sensitivity
//! products are a forward substitution and their adjoints a backward one.

use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

use super::{check_len, check_positive, fingerprint, ForwardProblem, Physics};
use crate::error::{Error, Result};
use crate::mesh::TensorMesh;
use crate::sparse::CsrMatrix;

/// Travel times for one source together with the upwind structure used to
/// compute them.
#[derive(Debug, Clone)]
pub struct FmmSolution {
    pub times: Vec<f64>,
    /// Cells in the order they were accepted; starts with the source.
    pub order: Vec<usize>,
    /// For every cell, `(neighbor, c_k)` with `c_k = 2 (u_i − u_k) / h_k²`.
    pub stencil: Vec<Vec<(usize, f64)>>,
    pub source: usize,
    /// Cells initialized analytically around the source, with `∂u_i/∂m_source`.
    pub seeded: Vec<(usize, f64)>,
}

#[derive(PartialEq)]
struct Trial {
    time: f64,
    cell: usize,
}

impl Eq for Trial {}

impl Ord for Trial {
    // Min-heap on time, ties broken by the lowest cell index.
    fn cmp(&self, other: &Self) -> CmpOrdering {
        other.time.total_cmp(&self.time).then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Trial {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

fn uniform_spacing(mesh: &TensorMesh) -> Result<Vec<f64>> {
    (0..mesh.dim())
        .map(|a| {
            let w = mesh.widths(a);
            let h = w[0];
            if w.iter().any(|&x| (x - h).abs() > 1e-12 * h) {
                return Err(Error::InvalidMesh(format!("fast marching needs uniform spacing; axis {a} is stretched")));
            }
            Ok(h)
        })
        .collect()
}

/// Godunov update from the smallest accepted neighbor per axis.
/// `cands` holds `(time, h, neighbor)`, at most one per axis.
fn godunov(mut cands: Vec<(f64, f64, usize)>, m: f64) -> (f64, Vec<(usize, f64)>) {
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut used = 1;
    let (t0, h0, _) = cands[0];
    let mut u = t0 + h0 * m.sqrt();
    for k in 2..=cands.len() {
        if u <= cands[k - 1].0 {
            break;
        }
        // Σ (u − t_i)² / h_i² = m over the first k axes.
        let (mut qa, mut qb, mut qc) = (0.0, 0.0, -m);
        for &(t, h, _) in &cands[..k] {
            let w = 1.0 / (h * h);
            qa += w;
            qb -= 2.0 * w * t;
            qc += w * t * t;
        }
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            break;
        }
        let cand = (-qb + disc.sqrt()) / (2.0 * qa);
        if cand < cands[k - 1].0 {
            break;
        }
        u = cand;
        used = k;
    }
    let stencil = cands[..used].iter().map(|&(t, h, n)| (n, 2.0 * (u - t) / (h * h))).collect();
    (u, stencil)
}

/// Solves the eikonal equation from one source cell.
pub fn fast_marching(mesh: &TensorMesh, m: &[f64], source: usize) -> Result<FmmSolution> {
    fast_marching_seeded(mesh, m, source, 0.0)
}

/// Like [`fast_marching`], but cells whose centers lie within `radius` of the
/// source center start from the straight-ray time `√m_source · distance`.
///
/// The point-source singularity otherwise costs the first-order scheme a
/// logarithmic factor in accuracy; a fixed physical seeding radius restores
/// first-order convergence when the medium is locally constant around the
/// source.
pub fn fast_marching_seeded(mesh: &TensorMesh, m: &[f64], source: usize, radius: f64) -> Result<FmmSolution> {
    let h = uniform_spacing(mesh)?;
    let n = mesh.n_cells();
    check_len("squared slowness", m.len(), n)?;
    check_positive("squared slowness", m)?;
    if source >= n {
        return Err(Error::InvalidArgument(format!("source cell {source} outside mesh of {n} cells")));
    }
    let shape = mesh.shape();
    let dim = shape.len();
    let mut stride = vec![1usize; dim];
    for a in 1..dim {
        stride[a] = stride[a - 1] * shape[a - 1];
    }

    let mut times = vec![f64::INFINITY; n];
    let mut accepted = vec![false; n];
    let mut stencil: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut order = Vec::with_capacity(n);
    let mut heap = BinaryHeap::new();
    let mut frozen = vec![false; n];
    let mut seeded = Vec::new();
    let xs = mesh.cell_center(source);
    let slow = m[source].sqrt();
    for i in 0..n {
        let d = if i == source {
            0.0
        } else if radius > 0.0 {
            let x = mesh.cell_center(i);
            x.iter().zip(&xs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        } else {
            continue;
        };
        if d <= radius {
            times[i] = slow * d;
            frozen[i] = true;
            seeded.push((i, 0.5 * d / slow));
            heap.push(Trial { time: times[i], cell: i });
        }
    }

    while let Some(Trial { time, cell }) = heap.pop() {
        if accepted[cell] || time != times[cell] {
            continue;
        }
        accepted[cell] = true;
        order.push(cell);
        let sub = mesh.cell_sub(cell);
        for a in 0..dim {
            for up in [false, true] {
                let nb = match (up, sub[a]) {
                    (false, 0) => continue,
                    (false, _) => cell - stride[a],
                    (true, s) if s + 1 == shape[a] => continue,
                    (true, _) => cell + stride[a],
                };
                if accepted[nb] || frozen[nb] {
                    continue;
                }
                let nsub = mesh.cell_sub(nb);
                let mut cands = Vec::with_capacity(dim);
                for b in 0..dim {
                    let mut best: Option<(f64, usize)> = None;
                    for dir in [false, true] {
                        let k = match (dir, nsub[b]) {
                            (false, 0) => continue,
                            (false, _) => nb - stride[b],
                            (true, s) if s + 1 == shape[b] => continue,
                            (true, _) => nb + stride[b],
                        };
                        if accepted[k] && best.is_none_or(|(t, _)| times[k] < t) {
                            best = Some((times[k], k));
                        }
                    }
                    if let Some((t, k)) = best {
                        cands.push((t, h[b], k));
                    }
                }
                let (u, st) = godunov(cands, m[nb]);
                if u < times[nb] {
                    times[nb] = u;
                    stencil[nb] = st;
                    heap.push(Trial { time: u, cell: nb });
                }
            }
        }
    }
    Ok(FmmSolution { times, order, stencil, source, seeded })
}

impl FmmSolution {
    /// Forward substitution for `δu` given `δm`.
    pub fn linearized(&self, dm: &[f64]) -> Vec<f64> {
        let mut du = vec![0.0; self.times.len()];
        for &(i, c) in &self.seeded {
            du[i] = c * dm[self.source];
        }
        for &i in &self.order {
            let st = &self.stencil[i];
            if st.is_empty() {
                continue;
            }
            let denom: f64 = st.iter().map(|(_, c)| c).sum();
            let num: f64 = dm[i] + st.iter().map(|&(k, c)| c * du[k]).sum::<f64>();
            du[i] = num / denom;
        }
        du
    }

    /// Backward substitution: adjoint of [`FmmSolution::linearized`].
    pub fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut acc = y.to_vec();
        let mut out = vec![0.0; self.times.len()];
        for &i in self.order.iter().rev() {
            let st = &self.stencil[i];
            if st.is_empty() {
                continue;
            }
            let denom: f64 = st.iter().map(|(_, c)| c).sum();
            let lam = acc[i] / denom;
            out[i] = lam;
            for &(k, c) in st {
                acc[k] += c * lam;
            }
        }
        for &(i, c) in &self.seeded {
            out[self.source] += c * acc[i];
        }
        out
    }

    /// Checks that every stencil neighbor was accepted earlier.
    pub fn is_causal(&self) -> bool {
        let mut pos = vec![usize::MAX; self.times.len()];
        for (p, &c) in self.order.iter().enumerate() {
            pos[c] = p;
        }
        self.order.iter().all(|&i| self.stencil[i].iter().all(|&(k, _)| pos[k] < pos[i]))
    }
}

struct EikonalCache {
    hash: u64,
    solutions: Vec<FmmSolution>,
}

pub struct EikonalProblem {
    mesh: TensorMesh,
    sources: Vec<usize>,
    receivers: CsrMatrix<f64>,
    source_radius: f64,
    cache: Option<Arc<EikonalCache>>,
    solves: Arc<AtomicU64>,
}

impl Clone for EikonalProblem {
    fn clone(&self) -> Self {
        Self {
            mesh: self.mesh.clone(),
            sources: self.sources.clone(),
            receivers: self.receivers.clone(),
            source_radius: self.source_radius,
            cache: self.cache.clone(),
            solves: Arc::new(AtomicU64::new(self.solves.load(Ordering::Relaxed))),
        }
    }
}

impl EikonalProblem {
    /// `sources` are cell indices; `receivers` has one sampling row per receiver.
    pub fn new(mesh: TensorMesh, sources: Vec<usize>, receivers: CsrMatrix<f64>) -> Result<Self> {
        uniform_spacing(&mesh)?;
        let n = mesh.n_cells();
        if let Some(s) = sources.iter().find(|&&s| s >= n) {
            return Err(Error::InvalidArgument(format!("source cell {s} outside mesh of {n} cells")));
        }
        if receivers.cols() != n {
            return Err(Error::DimensionMismatch(format!("receiver matrix has {} columns for {n} cells", receivers.cols())));
        }
        Ok(Self { mesh, sources, receivers, source_radius: 0.0, cache: None, solves: Arc::new(AtomicU64::new(0)) })
    }

    /// Seeds cells within `radius` of each source with straight-ray times.
    pub fn with_source_radius(mut self, radius: f64) -> Self {
        self.source_radius = radius.max(0.0);
        self.cache = None;
        self
    }

    pub fn mesh(&self) -> &TensorMesh {
        &self.mesh
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn receivers(&self) -> &CsrMatrix<f64> {
        &self.receivers
    }

    pub fn solutions(&self) -> Option<&[FmmSolution]> {
        self.cache.as_ref().map(|c| c.solutions.as_slice())
    }

    fn cache_for(&self, m: &[f64]) -> Result<&EikonalCache> {
        match &self.cache {
            Some(c) if c.hash == fingerprint(m) => Ok(c),
            _ => Err(Error::StaleCache),
        }
    }
}

impl ForwardProblem for EikonalProblem {
    fn physics(&self) -> Physics {
        Physics::Eikonal
    }

    fn n_cells(&self) -> usize {
        self.mesh.n_cells()
    }

    fn n_data(&self) -> usize {
        self.receivers.rows() * self.sources.len()
    }

    fn n_sources(&self) -> usize {
        self.sources.len()
    }

    fn forward(&mut self, m: &[f64]) -> Result<Vec<f64>> {
        self.cache = None;
        let solutions = self
            .sources
            .par_iter()
            .map(|&s| fast_marching_seeded(&self.mesh, m, s, self.source_radius))
            .collect::<Result<Vec<_>>>()?;
        self.solves.fetch_add(solutions.len() as u64, Ordering::Relaxed);
        let mut data = Vec::with_capacity(self.n_data());
        for sol in &solutions {
            data.extend(self.receivers.spmv(&sol.times)?);
        }
        self.cache = Some(Arc::new(EikonalCache { hash: fingerprint(m), solutions }));
        Ok(data)
    }

    fn sens_matvec(&self, m: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cache_for(m)?;
        check_len("model perturbation", v.len(), self.mesh.n_cells())?;
        self.solves.fetch_add(cache.solutions.len() as u64, Ordering::Relaxed);
        let cols: Vec<Vec<f64>> = cache.solutions.par_iter().map(|s| s.linearized(v)).collect();
        let mut out = Vec::with_capacity(self.n_data());
        for du in &cols {
            out.extend(self.receivers.spmv(du)?);
        }
        Ok(out)
    }

    fn sens_tmatvec(&self, m: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cache_for(m)?;
        check_len("data vector", w.len(), self.n_data())?;
        self.solves.fetch_add(cache.solutions.len() as u64, Ordering::Relaxed);
        let np = self.receivers.rows();
        let parts = cache
            .solutions
            .par_iter()
            .zip(w.par_chunks(np.max(1)))
            .map(|(s, r)| Ok(s.adjoint(&self.receivers.spmv_t(r)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![0.0; self.mesh.n_cells()];
        for p in parts {
            out.iter_mut().zip(p).for_each(|(o, v)| *o += v);
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
        self.mesh.byte_size() + 8 * self.sources.len() + self.receivers.byte_size()
    }

    fn cache_bytes(&self) -> usize {
        self.cache.as_ref().map_or(0, |c| {
            c.solutions.iter().map(|s| 16 * s.times.len() + 16 * s.stencil.iter().map(Vec::len).sum::<usize>()).sum()
        })
    }

    fn box_clone(&self) -> Box<dyn ForwardProblem> {
        Box::new(self.clone())
    }
}
