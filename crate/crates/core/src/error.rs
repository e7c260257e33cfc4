use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("node {0} does not belong to this tape")]
    ForeignNode(usize),

    #[error("grad_check: non-finite function value at coordinate {coordinate}")]
    GradCheckNonFinite { coordinate: usize },

    #[error("cosine_loss: feature norm {norm:e} below floor {floor:e}")]
    ZeroNorm { norm: f64, floor: f64 },

    #[error("age label {age} outside 1..={num_ages}")]
    AgeOutOfRange { age: i64, num_ages: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("protocol-incompatible dataset: {0}")]
    ProtocolIncompatible(String),

    #[error("adam: non-finite gradient in parameter `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl Error {
    /// Process exit status: 2 for usage, input and config problems, 1 for
    /// numerical or verification failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::ProtocolIncompatible(_)
            | Error::AgeOutOfRange { .. } => 2,
            _ => 1,
        }
    }
}
