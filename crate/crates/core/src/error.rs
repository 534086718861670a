use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the estimators, feature maps and data loaders.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// Every cosine of the raw random Fourier embedding vanished at once, so
    /// the embedding cannot be normalized.
    #[error("degenerate embedding: raw RFF vector has zero norm")]
    DegenerateEmbedding,

    /// The query has no support under the joint density matrix.
    #[error("zero evidence: collapse trace {evidence:e} is below the support threshold")]
    ZeroEvidence { evidence: f64 },

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("ragged row at line {line}: expected {expected} fields, found {found}")]
    RaggedRow { line: usize, expected: usize, found: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Coarse category used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => ErrorKind::Usage,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::RaggedRow { .. }
            | Error::Data(_)
            | Error::Serialization(_)
            | Error::Csv(_) => ErrorKind::Data,
            Error::DegenerateEmbedding
            | Error::ZeroEvidence { .. }
            | Error::NumericFailure(_)
            | Error::NoConvergence { .. }
            | Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
