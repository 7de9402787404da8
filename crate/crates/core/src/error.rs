use std::path::PathBuf;

use crate::layout::protocol::LayoutParseError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A value outside the configured domain, e.g. an unknown character id.
    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    LayoutParse(#[from] LayoutParseError),

    /// A planner or client answered with something that violates its protocol.
    #[error("protocol violation: {reason}")]
    Protocol { reason: String, raw: String },

    #[error("client error: {0}")]
    Client(String),

    #[error("unsupported schema version {found} in {path:?} (expected {expected})")]
    SchemaVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("malformed file {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
