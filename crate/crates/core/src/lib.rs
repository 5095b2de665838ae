//! Mesh-based forward modeling and parameter estimation for coupled
//! geophysical inverse problems.

pub mod error;
pub mod forward;
pub mod inverse;
pub mod mesh;
pub mod scalar;
pub mod scheduler;
pub mod sparse;

pub use error::{Error, Result};
pub use scalar::{Complex64, Scalar};
