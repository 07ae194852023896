use thiserror::Error;

/// Errors raised by the numeric core, models and data loaders.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("gradient tape already consumed by a previous backward pass")]
    TapeReused,

    #[error("invalid data: {0}")]
    Data(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("bad IDX magic number 0x{observed:08x} (expected 0x{expected:08x})")]
    IdxMagic { observed: u32, expected: u32 },

    #[error("truncated IDX payload: expected {expected} bytes, found {actual}")]
    IdxTruncated { expected: usize, actual: usize },

    #[error("IDX dimensions overflow addressable size: {dims:?}")]
    IdxOverflow { dims: Vec<u32> },

    #[error("training aborted at epoch {epoch}: non-finite objective on tasks {tasks:?}")]
    NonFiniteObjective { epoch: usize, tasks: Vec<usize> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
