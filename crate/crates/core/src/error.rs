use thiserror::Error;

use crate::stage::CoeffFormat;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("matrix is not symmetric at ({row}, {col}): difference {diff:e}")]
    NotSymmetric { row: usize, col: usize, diff: f64 },

    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular Gram system (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("malformed position vector at pair {pair}: ({positive:e}, {negative:e})")]
    MalformedPosition { pair: usize, positive: f64, negative: f64 },

    #[error("expected a {expected:?}-format coefficient vector")]
    WrongFormat { expected: CoeffFormat },

    #[error("zero variance in sample")]
    ZeroVariance,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure category, used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Argument,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NoConvergence { .. }
            | Error::Singular { .. }
            | Error::ZeroVariance
            | Error::Numerical(_)
            | Error::MalformedPosition { .. } => ErrorKind::Numerical,
            Error::Format(_) | Error::Io(_) | Error::Empty(_) => ErrorKind::Data,
            Error::DimensionMismatch { .. }
            | Error::NotSymmetric { .. }
            | Error::WrongFormat { .. }
            | Error::InvalidArgument(_) => ErrorKind::Argument,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, actual })
        }
    }
}
