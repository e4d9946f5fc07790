use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, BmgfError>;

#[derive(Debug, Error)]
pub enum BmgfError {
    /// Operand shapes do not conform to the primitive's contract.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller violated a precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed user input such as an empty argument or an over-long sequence.
    #[error("input error: {0}")]
    Input(String),

    /// A dataset row failed validation.
    #[error("data error at {location}: {message}")]
    Data { location: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl BmgfError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        BmgfError::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BmgfError::Io { path: path.into(), source }
    }
}
