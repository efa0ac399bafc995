use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("perturbation space size exceeds u64 range at budget {budget}")]
    CountOverflow { budget: usize },

    #[error("simplex construction needs at least the base vertex")]
    EmptyVertices,

    #[error("invalid perturbation budget: {0}")]
    InvalidDelta(String),

    #[error("unknown architecture: {0}")]
    UnknownArch(String),

    #[error("bad architecture descriptor `{descriptor}`: {msg}")]
    BadDescriptor { descriptor: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("label {label} out of range for {classes} classes ({path} line {line})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        path: String,
        line: usize,
    },

    #[error("sequence of {len} tokens is shorter than the network minimum {min}")]
    SequenceTooShort { len: usize, min: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
