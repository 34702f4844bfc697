//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by configuration validation, the numerical kernels and the
/// solvers.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field violates one of the documented constraints.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Operands of a matrix operation have inconsistent shapes.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An AP or user index is outside the configured range.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// A matrix expected to be Hermitian failed the symmetry check.
    #[error("matrix is not Hermitian: residual {residual:.3e} exceeds bound {bound:.3e}")]
    NotHermitian { residual: f64, bound: f64 },

    /// A matrix expected to be positive definite could not be factorized or
    /// inverted.
    #[error("singular or indefinite matrix: {0}")]
    SingularMatrix(String),

    /// The caller-supplied bisection bracket does not enclose the target.
    #[error("bisection bracket violation: {0}")]
    BracketViolation(String),

    /// A solver produced a non-finite quantity.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// Convenience alias used by all fallible APIs in this crate.
pub type Result<T> = std::result::Result<T, Error>;
