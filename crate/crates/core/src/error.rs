//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by ensemble construction, the control laws, numerical
/// integration, and the shooting solver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("subsystem weight must be positive, got {0}")]
    InvalidWeight(f64),

    #[error("zero action must be admissible: {0}")]
    ZeroNotAdmissible(String),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("action set must be compact here: {0}")]
    UnboundedActionSet(String),

    #[error("missing control cost matrix R: {0}")]
    MissingR(String),

    #[error("missing state cost matrix: {0}")]
    MissingQ(String),

    #[error("operation not available in this problem mode: {0}")]
    ModeMismatch(String),

    #[error("non-finite state at node {node} ({what})")]
    NonFiniteState { node: usize, what: String },

    #[error("Riccati solution escaped (norm above 1e12) at node {node}")]
    FiniteEscape { node: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
