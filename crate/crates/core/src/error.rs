use thiserror::Error;

/// Errors produced by the estimation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    /// A lattice enumeration would exceed the configured term budget.
    #[error("lattice of {terms} terms exceeds the budget of {budget}")]
    Resource { terms: f64, budget: usize },

    /// Retained eigenvalue `index` (1-based) does not exceed the noise floor.
    #[error("component {index} is degenerate: eigenvalue {eigenvalue} <= noise variance {noise}")]
    DegenerateComponent {
        index: usize,
        eigenvalue: f64,
        noise: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn numerical(msg: impl Into<String>) -> Error {
    Error::Numerical(msg.into())
}
