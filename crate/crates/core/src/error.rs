use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} is {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFiniteValue(&'static str),

    #[error("minibatch is empty")]
    EmptyBatch,

    #[error("minibatch index {index} out of range for {n} data points")]
    BatchIndexOutOfRange { index: usize, n: usize },

    #[error("parse error at row {row}, column {col}: {message}")]
    ParseError { row: usize, col: usize, message: String },

    #[error("label at row {row} has value {value}; labels must take at most two distinct values")]
    LabelDomainError { row: usize, value: f64 },

    #[error("thermostat blow-up: {0}")]
    ThermostatBlowup(String),

    #[error("trace is empty")]
    EmptyTrace,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
