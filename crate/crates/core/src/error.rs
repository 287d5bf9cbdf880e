use std::path::PathBuf;

/// Errors raised across the search engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes or axes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Image/patch geometry is inconsistent.
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Invalid configuration value; `field` names the offending key.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    /// The search produced a non-finite loss or similar runtime failure.
    #[error("search aborted: {0}")]
    Abort(String),

    #[error("missing file {}", .0.display())]
    Missing(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: msg.into(),
        }
    }
}
