use thiserror::Error;

/// Errors produced by mesh construction, solvers, forward problems, the
/// optimizer and the worker pool.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("unsupported dimension {0}, expected 2 or 3")]
    UnsupportedDimension(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotSpd { row: usize, pivot: f64 },
    #[error("singular pivot at row {0}")]
    SingularPivot(usize),
    #[error("singular preconditioner: zero diagonal at row {0}")]
    SingularPreconditioner(usize),
    #[error("invalid solver configuration: {0}")]
    InvalidSolver(String),
    #[error("{method} breakdown after {iterations} iterations")]
    Breakdown { method: &'static str, iterations: usize },
    #[error("invalid coefficient: {0}")]
    InvalidCoefficient(String),
    #[error("invalid padding: {0}")]
    InvalidPadding(String),
    #[error("forward solve failed: {0}")]
    ForwardSolve(String),
    #[error("stale cache: sensitivities requested for a model that was not simulated")]
    StaleCache,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line search failed after {0} backtracks")]
    LineSearchFailure(usize),
    #[error("worker {worker} failed on batch {batch}: {reason}")]
    WorkerFailure { worker: usize, batch: usize, reason: String },
    #[error("distribution of batch {batch} to worker {worker} refused: {reason}")]
    Distribution { batch: usize, worker: usize, reason: String },
    #[error("stale assignment: worker {worker} no longer holds batch {batch}")]
    StaleAssignment { worker: usize, batch: usize },
    #[error("frozen assignment violated: batch {batch} is not warm on worker {worker}")]
    FrozenAssignment { worker: usize, batch: usize },
    #[error("scheduler: {0}")]
    Scheduler(String),
    #[error("metric: {0}")]
    Metric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
