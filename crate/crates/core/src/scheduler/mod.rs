//! Parallel evaluation of misfit terms and scaling metrics.

pub mod metrics;
pub mod pool;

pub use metrics::{strong_scaling_speedup, weak_scaling_efficiency};
pub use pool::{AssignmentMap, Mode, PoolOptions, Traffic, WorkerPool};
