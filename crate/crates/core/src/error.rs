use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter `{name}`: {reason}")]
    Param { name: String, reason: String },

    #[error("input size {h}x{w} rejected: {reason}")]
    InputSize { h: usize, w: usize, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("graph structure error: {0}")]
    Structure(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("weight file: {0}")]
    Weights(#[from] WeightError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Weight-file failures. Each variant carries a stable numeric code.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeightError {
    #[error("bad magic")]
    BadMagic,
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("shape conflict for `{name}`: file {file:?}, expected {expected:?}")]
    ShapeConflict {
        name: String,
        file: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("truncated at byte {0}")]
    Truncated(usize),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("invalid tensor name at byte {0}")]
    BadName(usize),
}

impl WeightError {
    pub fn code(&self) -> u8 {
        match self {
            WeightError::BadMagic => 1,
            WeightError::Crc { .. } => 2,
            WeightError::UnknownDtype(_) => 3,
            WeightError::ShapeConflict { .. } => 4,
            WeightError::Truncated(_) => 5,
            WeightError::DuplicateName(_) => 6,
            WeightError::BadName(_) => 7,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, axis: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            op,
            axis,
            expected,
            got,
        }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Param {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
