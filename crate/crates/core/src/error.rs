use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("quadrature did not converge: value {value:e}, achieved error {achieved:e}, requested {requested:e}")]
    Quadrature {
        value: f64,
        achieved: f64,
        requested: f64,
    },

    #[error("time {0} is not on the time lattice")]
    OffLattice(f64),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("noise lattice of {cells} cells exceeds the cap of {cap}")]
    MemoryCap { cells: usize, cap: usize },

    #[error("instability at step {step}: |u| = {magnitude:e} exceeds the blow-up guard")]
    BlowUp { step: usize, magnitude: f64 },

    #[error("localization box does not fit: {0}")]
    BoxDoesNotFit(String),

    #[error("truncation tail too large: {tail:e} > {limit:e}")]
    TruncationTail { tail: f64, limit: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("sigma vanishes inside the integration range at grid index {index}")]
    PolarityViolated { index: usize },

    #[error("non-positive solution value {value:e} at grid index {index}")]
    NonPositive { index: usize, value: f64 },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
