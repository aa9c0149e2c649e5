//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid input: bad configuration values, mismatched grids, malformed files.
    #[error("validation: {0}")]
    Validation(String),

    /// A model assumption failed at runtime. The flagship case is the mode
    /// Riccati equation escaping to infinity before reaching t = 0, which
    /// means the decoupled computation route is unavailable on this horizon.
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    /// Non-finite values or other numerical breakdown during integration.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CoreError::Validation(msg.into())
    }

    /// Process exit code convention: 1 validation, 2 assumption violation,
    /// 3 numerical failure (0 is success).
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Validation(_) | CoreError::Io(_) => 1,
            CoreError::AssumptionViolated(_) => 2,
            CoreError::Numerical(_) => 3,
        }
    }
}
