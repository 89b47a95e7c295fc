use thiserror::Error;

pub type Result<T> = std::result::Result<T, VfmError>;

/// Error type shared across the crate.
#[derive(Error, Debug)]
pub enum VfmError {
    /// Shape mismatch in a graph op; names the op and the offending shapes.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A contract violation that is not a shape problem (bad ratio, empty
    /// input, rank too large, ...).
    #[error("{0}")]
    Invalid(String),

    /// NaN or Inf encountered where finite values are required.
    #[error("non-finite value in {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { what: String, step: Option<u64> },

    /// Token not present in the vocabulary.
    #[error("out-of-vocabulary token `{0}`")]
    Vocab(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VfmError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        VfmError::Shape { op, detail: detail.into() }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        VfmError::Invalid(msg.into())
    }
}
