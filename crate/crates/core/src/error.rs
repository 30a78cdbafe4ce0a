use thiserror::Error;

/// Errors produced by the alignment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed container: bad magic, unsupported version, truncated payload.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed container carrying unusable values (NaN, Inf, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("row {row} has norm {norm:e}, too small to normalize")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("matrix is numerically singular: {0}")]
    Singular(String),

    #[error("CKA undefined: {0}")]
    UndefinedCka(String),

    #[error("rows are not unit-norm: row {row} has norm {norm}")]
    NotNormalized { row: usize, norm: f64 },

    #[error("non-finite value encountered at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("empty input: {0}")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, Error>;
