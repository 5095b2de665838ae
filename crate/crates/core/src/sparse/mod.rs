//! Sparse matrix storage, direct factorization and Krylov solvers.

mod csr;
mod krylov;
mod ldl;
pub mod ordering;
mod precond;

pub use csr::CsrMatrix;
pub use krylov::{
    bicgstab, block_pcg, factorize_spd, krylov_solve, pcg, SolveReport, SolverHandle, SolverKind, SolverSpec,
};
pub use ldl::LdlFactor;
pub use precond::{make_preconditioner, IdentityPreconditioner, Jacobi, Preconditioner, PreconditionerKind, Ssor};
