use thiserror::Error;

/// Errors produced by the registration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered in {context}{}", iteration.map(|t| format!(" at iteration {t}")).unwrap_or_default())]
    NonFinite {
        context: &'static str,
        iteration: Option<usize>,
    },

    #[error("degenerate input for {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
