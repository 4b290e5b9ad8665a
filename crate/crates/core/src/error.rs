use thiserror::Error;

/// Errors surfaced by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter for {op}: {detail}")]
    Parameter { op: &'static str, detail: String },

    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),

    #[error("tensor was recorded on a different tape")]
    TapeMismatch,

    #[error("container format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("scene error: {0}")]
    Scene(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn param_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Parameter {
        op,
        detail: detail.into(),
    }
}
