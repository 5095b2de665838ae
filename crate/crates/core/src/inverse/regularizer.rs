//! Regularizers on the model mesh.

use crate::mesh::{gradient_operator, TensorMesh};
use crate::sparse::CsrMatrix;

/// Value, gradient and (approximate) Hessian of `R(m)`.
pub trait Regularizer: Send + Sync {
    fn value_grad(&self, m: &[f64]) -> (f64, Vec<f64>);

    /// Hessian, or its lagged-diffusivity approximation for non-quadratic `R`.
    fn hessian(&self, m: &[f64]) -> CsrMatrix<f64>;
}

/// `R(m) = ½ (m − m_ref)ᵀ L (m − m_ref)` with `L = Gᵀ V_f G`.
#[derive(Debug, Clone)]
pub struct DiffusionReg {
    laplacian: CsrMatrix<f64>,
    m_ref: Vec<f64>,
}

impl DiffusionReg {
    pub fn new(mesh: &TensorMesh, m_ref: Vec<f64>) -> Self {
        let g = gradient_operator(mesh);
        let laplacian = g.transpose().scale(None, Some(&mesh.face_volumes())).matmul(&g).expect("shapes agree");
        Self { laplacian, m_ref }
    }

    pub fn laplacian(&self) -> &CsrMatrix<f64> {
        &self.laplacian
    }

    pub fn reference(&self) -> &[f64] {
        &self.m_ref
    }
}

impl Regularizer for DiffusionReg {
    fn value_grad(&self, m: &[f64]) -> (f64, Vec<f64>) {
        let d: Vec<f64> = m.iter().zip(&self.m_ref).map(|(a, b)| a - b).collect();
        let ld = self.laplacian.spmv(&d).expect("model length matches mesh");
        (0.5 * d.iter().zip(&ld).map(|(a, b)| a * b).sum::<f64>(), ld)
    }

    fn hessian(&self, _m: &[f64]) -> CsrMatrix<f64> {
        self.laplacian.clone()
    }
}

/// Free-function form: value, gradient and Hessian of the diffusion term.
pub fn diffusion_reg(mesh: &TensorMesh, m: &[f64], m_ref: &[f64]) -> (f64, Vec<f64>, CsrMatrix<f64>) {
    let r = DiffusionReg::new(mesh, m_ref.to_vec());
    let (v, g) = r.value_grad(m);
    (v, g, r.laplacian)
}

/// Smoothed total variation `R(m) = Σ_f V_f √((G m)_f² + ε²)`, where `V_f`
/// is the face measure (area times center distance).
#[derive(Debug, Clone)]
pub struct TvReg {
    grad: CsrMatrix<f64>,
    face_vol: Vec<f64>,
    eps: f64,
}

impl TvReg {
    pub fn new(mesh: &TensorMesh, eps: f64) -> Self {
        Self { grad: gradient_operator(mesh), face_vol: mesh.face_volumes(), eps }
    }

    fn face_terms(&self, m: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let gm = self.grad.spmv(m).expect("model length matches mesh");
        let s = gm.iter().map(|g| (g * g + self.eps * self.eps).sqrt()).collect();
        (gm, s)
    }
}

impl Regularizer for TvReg {
    fn value_grad(&self, m: &[f64]) -> (f64, Vec<f64>) {
        let (gm, s) = self.face_terms(m);
        let value = s.iter().zip(&self.face_vol).map(|(a, b)| a * b).sum();
        let flux: Vec<f64> = gm.iter().zip(&s).zip(&self.face_vol).map(|((g, s), v)| v * g / s).collect();
        (value, self.grad.spmv_t(&flux).expect("face count matches"))
    }

    fn hessian(&self, m: &[f64]) -> CsrMatrix<f64> {
        let (_, s) = self.face_terms(m);
        let w: Vec<f64> = s.iter().zip(&self.face_vol).map(|(s, v)| v / s).collect();
        self.grad.transpose().scale(None, Some(&w)).matmul(&self.grad).expect("shapes agree")
    }
}

/// Free-function form of [`TvReg`].
pub fn tv_reg(mesh: &TensorMesh, m: &[f64], eps_tv: f64) -> (f64, Vec<f64>, CsrMatrix<f64>) {
    let r = TvReg::new(mesh, eps_tv);
    let (v, g) = r.value_grad(m);
    (v, g, r.hessian(m))
}
