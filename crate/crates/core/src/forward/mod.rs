//! Forward problems: DC resistivity, frequency-domain Helmholtz and
//! first-arrival travel times, behind one interface used by the optimizer.
//!
//! Data vectors are real. Complex data are interleaved as `(re, im)` pairs.
//! Multi-source data are stored source by source: the receivers of source 0
//! first, then source 1, and so on.

pub mod dc;
pub mod eikonal;
pub mod helmholtz;
pub mod linear;

use std::hash::Hasher;

use num_complex::Complex32;

use crate::error::{Error, Result};
use crate::mesh::TensorMesh;
use crate::scalar::Complex64;
use crate::sparse::{CsrMatrix, SolveReport};

pub use dc::DcProblem;
pub use eikonal::EikonalProblem;
pub use helmholtz::{build_attenuation_layer, HelmholtzProblem, Side};
pub use linear::LinearProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Physics {
    Dc,
    Helmholtz,
    Eikonal,
    Linear,
}

/// A simulation that maps cell coefficients to data and applies its
/// sensitivity matrix without forming it.
///
/// `forward` populates a cache (factorization and fields) tagged with a
/// fingerprint of the coefficients; the sensitivity products require the
/// same coefficients and fail with [`Error::StaleCache`] otherwise.
pub trait ForwardProblem: Send + Sync {
    fn physics(&self) -> Physics;

    /// Angular frequency for wave problems.
    fn frequency(&self) -> Option<f64> {
        None
    }

    /// Length of the coefficient vector (simulation-mesh cells).
    fn n_cells(&self) -> usize;

    fn n_data(&self) -> usize;

    fn n_sources(&self) -> usize;

    fn forward(&mut self, coeff: &[f64]) -> Result<Vec<f64>>;

    fn sens_matvec(&self, coeff: &[f64], v: &[f64]) -> Result<Vec<f64>>;

    fn sens_tmatvec(&self, coeff: &[f64], w: &[f64]) -> Result<Vec<f64>>;

    /// PDE solves performed so far (forward, linearized and adjoint).
    fn solve_count(&self) -> u64;

    fn clear_cache(&mut self);

    fn has_cache(&self) -> bool;

    /// Bytes of mesh, source and receiver description shipped with the problem.
    fn setup_bytes(&self) -> usize;

    /// Bytes currently held in the cache (fields and factorization data).
    fn cache_bytes(&self) -> usize;

    fn box_clone(&self) -> Box<dyn ForwardProblem>;
}

impl Clone for Box<dyn ForwardProblem> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Order-sensitive 64-bit fingerprint of a coefficient vector.
pub fn fingerprint(x: &[f64]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    h.write_usize(x.len());
    for v in x {
        h.write_u64(v.to_bits());
    }
    h.finish()
}

/// Storage precision for cached fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FieldPrecision {
    #[default]
    Full,
    /// Fields are demoted to 32-bit floats after the solve.
    Single,
}

/// Cached fields, one column per source.
#[derive(Debug, Clone)]
pub enum RealFields {
    Full(Vec<Vec<f64>>),
    Single(Vec<Vec<f32>>),
}

impl RealFields {
    pub fn store(fields: Vec<Vec<f64>>, precision: FieldPrecision) -> Self {
        match precision {
            FieldPrecision::Full => Self::Full(fields),
            FieldPrecision::Single => {
                Self::Single(fields.into_iter().map(|c| c.into_iter().map(|v| v as f32).collect()).collect())
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Full(f) => f.len(),
            Self::Single(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        match self {
            Self::Full(f) => f[j].clone(),
            Self::Single(f) => f[j].iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn byte_size(&self) -> usize {
        match self {
            Self::Full(f) => f.iter().map(|c| c.len() * 8).sum(),
            Self::Single(f) => f.iter().map(|c| c.len() * 4).sum(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ComplexFields {
    Full(Vec<Vec<Complex64>>),
    Single(Vec<Vec<Complex32>>),
}

impl ComplexFields {
    pub fn store(fields: Vec<Vec<Complex64>>, precision: FieldPrecision) -> Self {
        match precision {
            FieldPrecision::Full => Self::Full(fields),
            FieldPrecision::Single => Self::Single(
                fields
                    .into_iter()
                    .map(|c| c.into_iter().map(|v| Complex32::new(v.re as f32, v.im as f32)).collect())
                    .collect(),
            ),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Full(f) => f.len(),
            Self::Single(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, j: usize) -> Vec<Complex64> {
        match self {
            Self::Full(f) => f[j].clone(),
            Self::Single(f) => f[j].iter().map(|v| Complex64::new(v.re as f64, v.im as f64)).collect(),
        }
    }

    pub fn byte_size(&self) -> usize {
        match self {
            Self::Full(f) => f.iter().map(|c| c.len() * 16).sum(),
            Self::Single(f) => f.iter().map(|c| c.len() * 8).sum(),
        }
    }
}

/// Rows are dipoles: `+1` in the cell containing the positive electrode and
/// `−1` in the cell containing the negative one.
pub fn dipole_matrix(mesh: &TensorMesh, dipoles: &[(Vec<f64>, Vec<f64>)]) -> Result<CsrMatrix<f64>> {
    let mut t = Vec::with_capacity(2 * dipoles.len());
    for (r, (a, b)) in dipoles.iter().enumerate() {
        check_point(mesh, a)?;
        check_point(mesh, b)?;
        let (ca, cb) = (mesh.locate(a), mesh.locate(b));
        if ca == cb {
            return Err(Error::InvalidArgument(format!("dipole {r} has both electrodes in cell {ca}")));
        }
        t.push((r, ca, 1.0));
        t.push((r, cb, -1.0));
    }
    CsrMatrix::from_triplets(dipoles.len(), mesh.n_cells(), &t)
}

/// Rows sample the cell containing each point.
pub fn point_matrix(mesh: &TensorMesh, points: &[Vec<f64>]) -> Result<CsrMatrix<f64>> {
    let mut t = Vec::with_capacity(points.len());
    for (r, p) in points.iter().enumerate() {
        check_point(mesh, p)?;
        t.push((r, mesh.locate(p), 1.0));
    }
    CsrMatrix::from_triplets(points.len(), mesh.n_cells(), &t)
}

fn check_point(mesh: &TensorMesh, p: &[f64]) -> Result<()> {
    if p.len() != mesh.dim() {
        return Err(Error::DimensionMismatch(format!("point {p:?} in a {}D mesh", mesh.dim())));
    }
    for (a, &x) in p.iter().enumerate() {
        let (lo, hi) = mesh.bounds(a);
        if x < lo || x > hi {
            return Err(Error::InvalidArgument(format!("point {p:?} outside the mesh")));
        }
    }
    Ok(())
}

pub(crate) fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::DimensionMismatch(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

pub(crate) fn check_positive(what: &str, x: &[f64]) -> Result<()> {
    if let Some(i) = x.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidCoefficient(format!("{what}[{i}] = {} is not positive", x[i])));
    }
    Ok(())
}

pub(crate) fn check_reports(reports: &[SolveReport]) -> Result<()> {
    if let Some((j, r)) = reports.iter().enumerate().find(|(_, r)| !r.converged) {
        return Err(Error::ForwardSolve(format!(
            "column {j} stopped after {} iterations at relative residual {:.3e}",
            r.iterations, r.relative_residual
        )));
    }
    Ok(())
}
