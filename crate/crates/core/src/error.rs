use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Short stable identifier used in machine-parseable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::InvalidArgument { .. } => "argument",
            Error::NonFinite { .. } => "non-finite",
            Error::Format(_) => "format",
            Error::Truncated(_) => "truncated",
            Error::ParamMismatch(_) => "param-mismatch",
            Error::Config(_) => "config",
            Error::Undefined(_) => "undefined",
            Error::GradCheck(_) => "gradcheck",
            Error::Io { .. } => "io",
        }
    }
}
