//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0} is not supported here")]
    Unsupported(&'static str),

    #[error("singular linear system (zero pivot at row {0})")]
    SingularSystem(usize),

    #[error("bad IDX magic number: expected {expected:#010x}, got {actual:#010x}")]
    BadMagic { expected: u32, actual: u32 },

    #[error("truncated file: expected {expected} bytes of payload, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("empty dataset from {0}")]
    EmptyDataset(String),

    #[error("image decode failed for {path}: {reason}")]
    ImageDecode { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
