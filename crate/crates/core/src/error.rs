use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{what} = {value} is outside the valid range {range}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("near-singular covariance: Cholesky pivot {pivot:e} below guard {threshold:e}")]
    NearSingular { pivot: f64, threshold: f64 },

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("history cache is empty")]
    EmptyCache,

    #[error("times must be strictly increasing ({previous} then {next})")]
    NonIncreasingTimes { previous: f64, next: f64 },

    #[error("non-finite value at stage `{stage}` (t = {t})")]
    NonFinite { stage: &'static str, t: f64 },

    #[error("{0}")]
    Precondition(String),
}
