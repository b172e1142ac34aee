//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed file content; `offset` is the byte position where the
    /// problem was detected.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Numerical solver failed to converge or produce a usable iterate.
    #[error("solver failure: {0}")]
    Solver(String),

    /// The optimization problem instance has no feasible point.
    #[error("infeasible instance: {0}")]
    Infeasible(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format { offset, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
