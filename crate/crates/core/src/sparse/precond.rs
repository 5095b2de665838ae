use super::CsrMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Application of `M⁻¹` for a preconditioner `M`.
pub trait Preconditioner<T>: Send + Sync {
    fn apply(&self, r: &[T], z: &mut [T]);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PreconditionerKind {
    Identity,
    Jacobi,
    Ssor,
}

pub struct IdentityPreconditioner;

impl<T: Scalar> Preconditioner<T> for IdentityPreconditioner {
    fn apply(&self, r: &[T], z: &mut [T]) {
        z.copy_from_slice(r);
    }
}

pub struct Jacobi<T> {
    inv_diag: Vec<T>,
}

impl<T: Scalar> Jacobi<T> {
    pub fn new(a: &CsrMatrix<T>) -> Result<Self> {
        let inv_diag = nonzero_diag(a)?.into_iter().map(|d| T::one() / d).collect();
        Ok(Self { inv_diag })
    }
}

impl<T: Scalar> Preconditioner<T> for Jacobi<T> {
    fn apply(&self, r: &[T], z: &mut [T]) {
        for ((zi, &ri), &di) in z.iter_mut().zip(r).zip(&self.inv_diag) {
            *zi = ri * di;
        }
    }
}

/// Symmetric successive over-relaxation, `M = (D/ω + L) D⁻¹ (D/ω + U)`.
///
/// For symmetric `A` the upper factor is the transpose of the lower one, so
/// `M` is symmetric as PCG requires.
pub struct Ssor<T> {
    a: CsrMatrix<T>,
    diag: Vec<T>,
    omega: f64,
}

impl<T: Scalar> Ssor<T> {
    pub fn new(a: &CsrMatrix<T>, omega: f64) -> Result<Self> {
        if !(omega > 0.0 && omega < 2.0) {
            return Err(Error::InvalidSolver(format!("SSOR relaxation {omega} outside (0, 2)")));
        }
        let diag = nonzero_diag(a)?;
        Ok(Self { a: a.clone(), diag, omega })
    }
}

impl<T: Scalar> Preconditioner<T> for Ssor<T> {
    fn apply(&self, r: &[T], z: &mut [T]) {
        let n = r.len();
        let w = T::from_real(self.omega);
        let indptr = self.a.indptr();
        let indices = self.a.indices();
        let data = self.a.data();
        // (D/ω + L) y = r
        let mut y = vec![T::zero(); n];
        for i in 0..n {
            let mut acc = r[i];
            for k in indptr[i]..indptr[i + 1] {
                let j = indices[k];
                if j >= i {
                    break;
                }
                acc -= data[k] * y[j];
            }
            y[i] = acc * w / self.diag[i];
        }
        // (D/ω + U) z = D y
        for i in (0..n).rev() {
            let mut acc = self.diag[i] * y[i];
            for k in (indptr[i]..indptr[i + 1]).rev() {
                let j = indices[k];
                if j <= i {
                    break;
                }
                acc -= data[k] * z[j];
            }
            z[i] = acc * w / self.diag[i];
        }
    }
}

fn nonzero_diag<T: Scalar>(a: &CsrMatrix<T>) -> Result<Vec<T>> {
    let d = a.diag();
    if let Some(i) = d.iter().position(|v| v.abs() == 0.0) {
        return Err(Error::SingularPreconditioner(i));
    }
    Ok(d)
}

/// Builds the requested preconditioner for `A`. `omega` is only used by SSOR.
pub fn make_preconditioner<T: Scalar>(
    a: &CsrMatrix<T>,
    kind: PreconditionerKind,
    omega: f64,
) -> Result<Box<dyn Preconditioner<T>>> {
    Ok(match kind {
        PreconditionerKind::Identity => Box::new(IdentityPreconditioner),
        PreconditionerKind::Jacobi => Box::new(Jacobi::new(a)?),
        PreconditionerKind::Ssor => Box::new(Ssor::new(a, omega)?),
    })
}
