use thiserror::Error;

/// Errors raised by checkpoint decoding. Each corruption mode is its own case.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic: expected AKGP1")]
    BadMagic,
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("dimension overflow in record `{name}`")]
    DimOverflow { name: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("variable {0} does not belong to this tape")]
    NotOnTape(usize),
    #[error("trainable tensor `{0}` has no gradient")]
    MissingGrad(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("numeric failure at step {step}: {what}")]
    Numeric { step: u64, what: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
