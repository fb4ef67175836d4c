use thiserror::Error;

/// Errors raised by model construction, pooling, Gaussian algebra and the samplers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeldError {
    #[error("structural error: {0}")]
    Structure(String),

    #[error("dimension mismatch: {what} expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    /// A submodel joint is finite where its own prior marginal is zero.
    #[error("model inconsistency in submodel {submodel}: joint density is finite where the prior marginal is -inf")]
    ModelInconsistency { submodel: usize },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular covariance: {0}")]
    SingularCovariance(String),

    /// The precision difference of a Gaussian ratio is not positive definite.
    #[error("improper Gaussian ratio for block `{block}`: precision difference is not positive definite")]
    ImproperRatio { block: String },

    #[error("initialization failed after {attempts} attempts: {reason}")]
    Initialization { attempts: usize, reason: String },

    #[error("empty sample store: {0}")]
    EmptyStore(String),

    #[error("state space too large: {states} states exceeds limit {limit}")]
    StateSpaceTooLarge { states: u128, limit: u128 },

    #[error("diagnostics: {0}")]
    Diagnostics(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for MeldError {
    fn from(e: std::io::Error) -> Self {
        MeldError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, MeldError>;
