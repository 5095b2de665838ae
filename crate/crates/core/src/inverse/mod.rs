//! Objective terms, regularizers and the projected Gauss-Newton optimizer.

pub mod armijo;
pub mod executor;
pub mod gauss_newton;
pub mod misfit;
pub mod model_map;
pub mod regularizer;

pub use armijo::{project, projected_armijo, ArmijoOptions, ArmijoResult};
pub use executor::{Evaluation, Executor, RemoteRef, SerialExecutor};
pub use gauss_newton::{projected_gauss_newton, Bounds, GnOptions, GnState, GnStatus, IterationRecord, Preconditioning};
pub use misfit::{MisfitEval, MisfitKind, MisfitTerm, TermEval};
pub use model_map::{model_map_apply, ModelMap};
pub use regularizer::{diffusion_reg, tv_reg, DiffusionReg, Regularizer, TvReg};
