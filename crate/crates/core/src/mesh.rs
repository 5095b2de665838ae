//! Tensor meshes in two and three dimensions and the mimetic finite-volume
//! operators defined on them.
//!
//! Unknowns live at cell centers, ordered with the first axis fastest.
//! Fluxes live on interior faces only: boundary faces carry zero flux, which
//! realizes homogeneous Neumann conditions. Interior faces are enumerated
//! axis by axis; within an axis the face between cell `s` and `s + e_a` is
//! indexed by `s` on the grid shrunk by one along `a`.

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorMesh {
    widths: Vec<Vec<f64>>,
    origin: Vec<f64>,
}

impl TensorMesh {
    pub fn new(widths: Vec<Vec<f64>>, origin: Vec<f64>) -> Result<Self> {
        let dim = widths.len();
        if !(2..=3).contains(&dim) {
            return Err(Error::UnsupportedDimension(dim));
        }
        if origin.len() != dim {
            return Err(Error::InvalidMesh(format!("origin has {} entries for a {dim}D mesh", origin.len())));
        }
        for (axis, w) in widths.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::InvalidMesh(format!("axis {axis} has no cells")));
            }
            if let Some(bad) = w.iter().find(|&&h| !(h > 0.0 && h.is_finite())) {
                return Err(Error::InvalidMesh(format!("axis {axis} has non-positive width {bad}")));
            }
        }
        Ok(Self { widths, origin })
    }

    /// Mesh with constant spacing `h[a]` along each axis, origin at zero.
    pub fn uniform(n: &[usize], h: &[f64]) -> Result<Self> {
        if n.len() != h.len() {
            return Err(Error::InvalidMesh("cell counts and spacings differ in length".into()));
        }
        let widths = n.iter().zip(h).map(|(&k, &hk)| vec![hk; k]).collect();
        Self::new(widths, vec![0.0; n.len()])
    }

    pub fn dim(&self) -> usize {
        self.widths.len()
    }

    pub fn widths(&self, axis: usize) -> &[f64] {
        &self.widths[axis]
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn shape(&self) -> Vec<usize> {
        self.widths.iter().map(Vec::len).collect()
    }

    pub fn n_cells(&self) -> usize {
        self.widths.iter().map(Vec::len).product()
    }

    /// All faces normal to `axis`, boundary faces included.
    pub fn n_faces_axis(&self, axis: usize) -> usize {
        let mut s = self.shape();
        s[axis] += 1;
        s.iter().product()
    }

    pub fn n_faces(&self) -> usize {
        (0..self.dim()).map(|a| self.n_faces_axis(a)).sum()
    }

    pub fn n_interior_faces_axis(&self, axis: usize) -> usize {
        let mut s = self.shape();
        s[axis] -= 1;
        s.iter().product()
    }

    pub fn n_interior_faces(&self) -> usize {
        (0..self.dim()).map(|a| self.n_interior_faces_axis(a)).sum()
    }

    pub fn n_nodes(&self) -> usize {
        self.widths.iter().map(|w| w.len() + 1).product()
    }

    /// Domain extent `(lo, hi)` along `axis`.
    pub fn bounds(&self, axis: usize) -> (f64, f64) {
        let lo = self.origin[axis];
        (lo, lo + self.widths[axis].iter().sum::<f64>())
    }

    pub fn cell_index(&self, sub: &[usize]) -> usize {
        let shape = self.shape();
        let mut idx = 0;
        for a in (0..self.dim()).rev() {
            idx = idx * shape[a] + sub[a];
        }
        idx
    }

    pub fn cell_sub(&self, mut idx: usize) -> Vec<usize> {
        self.shape()
            .iter()
            .map(|&n| {
                let s = idx % n;
                idx /= n;
                s
            })
            .collect()
    }

    /// Cell-center coordinates along one axis.
    pub fn centers(&self, axis: usize) -> Vec<f64> {
        let mut x = self.origin[axis];
        self.widths[axis]
            .iter()
            .map(|&h| {
                let c = x + 0.5 * h;
                x += h;
                c
            })
            .collect()
    }

    pub fn cell_center(&self, idx: usize) -> Vec<f64> {
        let sub = self.cell_sub(idx);
        (0..self.dim())
            .map(|a| self.origin[a] + self.widths[a][..sub[a]].iter().sum::<f64>() + 0.5 * self.widths[a][sub[a]])
            .collect()
    }

    /// Index of the cell containing `x`, clamped to the mesh.
    pub fn locate(&self, x: &[f64]) -> usize {
        let sub: Vec<usize> = (0..self.dim())
            .map(|a| {
                let mut edge = self.origin[a];
                let w = &self.widths[a];
                for (i, &h) in w.iter().enumerate() {
                    edge += h;
                    if x[a] < edge {
                        return i;
                    }
                }
                w.len() - 1
            })
            .collect();
        self.cell_index(&sub)
    }

    pub fn cell_volumes(&self) -> Vec<f64> {
        (0..self.n_cells())
            .map(|i| self.cell_sub(i).iter().enumerate().map(|(a, &s)| self.widths[a][s]).product())
            .collect()
    }

    /// Iterates interior faces as `(axis, left cell, right cell)` in face order.
    pub fn interior_faces(&self) -> Vec<(usize, usize, usize)> {
        let shape = self.shape();
        let dim = self.dim();
        let mut out = Vec::with_capacity(self.n_interior_faces());
        for a in 0..dim {
            let mut fshape = shape.clone();
            fshape[a] -= 1;
            let nf: usize = fshape.iter().product();
            for f in 0..nf {
                let mut rem = f;
                let mut sub = vec![0usize; dim];
                for (b, &n) in fshape.iter().enumerate() {
                    sub[b] = rem % n;
                    rem /= n;
                }
                let left = self.cell_index(&sub);
                sub[a] += 1;
                let right = self.cell_index(&sub);
                out.push((a, left, right));
            }
        }
        out
    }

    /// Area (length in 2D) of each interior face.
    pub fn face_areas(&self) -> Vec<f64> {
        self.interior_faces()
            .iter()
            .map(|&(a, left, _)| {
                let sub = self.cell_sub(left);
                (0..self.dim()).filter(|&b| b != a).map(|b| self.widths[b][sub[b]]).product()
            })
            .collect()
    }

    /// Distance between the two cell centers adjacent to each interior face.
    pub fn face_center_distances(&self) -> Vec<f64> {
        self.interior_faces()
            .iter()
            .map(|&(a, left, right)| {
                let (sl, sr) = (self.cell_sub(left), self.cell_sub(right));
                0.5 * (self.widths[a][sl[a]] + self.widths[a][sr[a]])
            })
            .collect()
    }

    /// Dual volume `area × center distance` attached to each interior face.
    pub fn face_volumes(&self) -> Vec<f64> {
        self.face_areas().iter().zip(self.face_center_distances()).map(|(a, d)| a * d).collect()
    }

    pub fn byte_size(&self) -> usize {
        self.widths.iter().map(|w| w.len() + 1).sum::<usize>() * 8
    }
}

/// Checks and builds a tensor mesh; each axis needs at least two cells.
pub fn build_tensor_mesh(dim: usize, widths: Vec<Vec<f64>>, origin: Vec<f64>) -> Result<TensorMesh> {
    if !(2..=3).contains(&dim) {
        return Err(Error::UnsupportedDimension(dim));
    }
    if widths.len() != dim {
        return Err(Error::InvalidMesh(format!("{} width lists for a {dim}D mesh", widths.len())));
    }
    if let Some(a) = widths.iter().position(|w| w.len() < 2) {
        return Err(Error::InvalidMesh(format!("axis {a} needs at least two cells")));
    }
    TensorMesh::new(widths, origin)
}

/// Cell-to-interior-face gradient: two-point differences divided by the
/// distance between adjacent cell centers.
pub fn gradient_operator(mesh: &TensorMesh) -> CsrMatrix<f64> {
    let dist = mesh.face_center_distances();
    let mut t = Vec::with_capacity(2 * dist.len());
    for (f, &(_, left, right)) in mesh.interior_faces().iter().enumerate() {
        t.push((f, left, -1.0 / dist[f]));
        t.push((f, right, 1.0 / dist[f]));
    }
    CsrMatrix::from_triplets(dist.len(), mesh.n_cells(), &t).expect("face indices in range")
}

/// Face-to-cell divergence `D = −V⁻¹ Gᵀ V_f` (net outward flux per volume).
pub fn divergence_operator(mesh: &TensorMesh) -> CsrMatrix<f64> {
    let vol_inv: Vec<f64> = mesh.cell_volumes().iter().map(|v| -1.0 / v).collect();
    gradient_operator(mesh).transpose().scale(Some(&vol_inv), Some(&mesh.face_volumes()))
}

/// Cell-to-face coefficient averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Series-resistance average, weighted by the half-widths on each side.
    #[default]
    Harmonic,
    /// Linear interpolation to the face position.
    Arithmetic,
}

/// Weight matrix of the selected averaging. Arithmetic faces are `W σ`;
/// harmonic faces are `1 / (W σ⁻¹)`. Rows sum to one.
pub fn face_average_operator(mesh: &TensorMesh, averaging: Averaging) -> CsrMatrix<f64> {
    let faces = mesh.interior_faces();
    let mut t = Vec::with_capacity(2 * faces.len());
    for (f, &(a, left, right)) in faces.iter().enumerate() {
        let wl = mesh.widths[a][mesh.cell_sub(left)[a]];
        let wr = mesh.widths[a][mesh.cell_sub(right)[a]];
        let (cl, cr) = match averaging {
            Averaging::Arithmetic => (wr / (wl + wr), wl / (wl + wr)),
            Averaging::Harmonic => (wl / (wl + wr), wr / (wl + wr)),
        };
        t.push((f, left, cl));
        t.push((f, right, cr));
    }
    CsrMatrix::from_triplets(faces.len(), mesh.n_cells(), &t).expect("face indices in range")
}

/// Face coefficients from cell coefficients.
pub fn face_coefficients(weights: &CsrMatrix<f64>, sigma: &[f64], averaging: Averaging) -> Vec<f64> {
    match averaging {
        Averaging::Arithmetic => weights.spmv(sigma).expect("cell count matches"),
        Averaging::Harmonic => {
            let inv: Vec<f64> = sigma.iter().map(|s| 1.0 / s).collect();
            weights.spmv(&inv).expect("cell count matches").into_iter().map(|v| 1.0 / v).collect()
        }
    }
}

/// Jacobian `∂σ_face / ∂σ_cell` of [`face_coefficients`].
pub fn face_coefficient_derivative(weights: &CsrMatrix<f64>, sigma: &[f64], averaging: Averaging) -> CsrMatrix<f64> {
    match averaging {
        Averaging::Arithmetic => weights.clone(),
        Averaging::Harmonic => {
            let face = face_coefficients(weights, sigma, averaging);
            let left: Vec<f64> = face.iter().map(|s| s * s).collect();
            let right: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s)).collect();
            weights.scale(Some(&left), Some(&right))
        }
    }
}

/// Interpolation matrix between two meshes plus the number of destination
/// cells whose centers fell outside the source center hull and were clamped.
#[derive(Debug, Clone)]
pub struct MeshTransfer {
    pub matrix: CsrMatrix<f64>,
    pub clamped: usize,
}

/// Multilinear interpolation of cell-centered values from `src` to `dst`.
pub fn interp_mesh_to_mesh(src: &TensorMesh, dst: &TensorMesh) -> Result<MeshTransfer> {
    let dim = src.dim();
    if dst.dim() != dim {
        return Err(Error::InvalidMesh("meshes differ in dimension".into()));
    }
    for a in 0..dim {
        let (slo, shi) = src.bounds(a);
        let (dlo, dhi) = dst.bounds(a);
        let tol = 1e-9 * (shi - slo);
        if dlo < slo - tol || dhi > shi + tol {
            return Err(Error::InvalidMesh(format!(
                "destination axis {a} [{dlo}, {dhi}] not contained in source [{slo}, {shi}]"
            )));
        }
    }

    // Per-axis (index, weight) stencils for every destination center.
    let mut clamped_cells = vec![false; dst.n_cells()];
    let mut axis_weights: Vec<Vec<Vec<(usize, f64)>>> = Vec::with_capacity(dim);
    let mut axis_clamped: Vec<Vec<bool>> = Vec::with_capacity(dim);
    for a in 0..dim {
        let c = src.centers(a);
        let n = c.len();
        let tol = 1e-12 * (c[n - 1] - c[0]).abs().max(1.0);
        let mut ws = Vec::new();
        let mut cl = Vec::new();
        for x in dst.centers(a) {
            if n == 1 || x <= c[0] {
                cl.push(x < c[0] - tol);
                ws.push(vec![(0, 1.0)]);
            } else if x >= c[n - 1] {
                cl.push(x > c[n - 1] + tol);
                ws.push(vec![(n - 1, 1.0)]);
            } else {
                let i = c.partition_point(|&ci| ci <= x) - 1;
                let t = (x - c[i]) / (c[i + 1] - c[i]);
                cl.push(false);
                ws.push([(i, 1.0 - t), (i + 1, t)].into_iter().filter(|&(_, w)| w != 0.0).collect());
            }
        }
        axis_weights.push(ws);
        axis_clamped.push(cl);
    }

    let mut t = Vec::new();
    for (row, flag) in clamped_cells.iter_mut().enumerate() {
        let sub = dst.cell_sub(row);
        *flag = (0..dim).any(|a| axis_clamped[a][sub[a]]);
        let mut terms: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
        for a in 0..dim {
            let mut next = Vec::new();
            for (idx, w) in &terms {
                for &(i, wa) in &axis_weights[a][sub[a]] {
                    let mut s = idx.clone();
                    s.push(i);
                    next.push((s, w * wa));
                }
            }
            terms = next;
        }
        for (s, w) in terms {
            t.push((row, src.cell_index(&s), w));
        }
    }
    let matrix = CsrMatrix::from_triplets(dst.n_cells(), src.n_cells(), &t)?;
    Ok(MeshTransfer { matrix, clamped: clamped_cells.iter().filter(|&&c| c).count() })
}
