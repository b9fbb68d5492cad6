use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("integration blew up at step {step}: state component {component} = {value}")]
    IntegrationBlowup {
        step: usize,
        component: usize,
        value: f64,
    },

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("sample {index} at {point:?} lies outside the grid box")]
    OutOfDomain { index: usize, point: Vec<f64> },

    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty sample cloud")]
    EmptyCloud,

    #[error("degenerate dynamics: {0}")]
    DegenerateDynamics(String),

    #[error("CFL violated: I+K has entry {value:e} in column {cell}")]
    CflViolation { cell: usize, value: f64 },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("adjoint solve failed: residual {residual:e} above tolerance {tol:e}")]
    AdjointSolve { residual: f64, tol: f64 },

    #[error("cell {0} received no source samples")]
    EmptyCell(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
