#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// A stage was started without what it depends on (checkpoint, frozen part, ...).
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// A pipeline stage failed; `stage` names where.
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("client {client}: {reason}")]
    Client { client: String, reason: String },

    #[error(transparent)]
    Model(#[from] glyphdit_model::Error),

    #[error(transparent)]
    Core(#[from] glyphdit_core::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl Error {
    /// Wrap `self` with the name of the pipeline stage it came from.
    pub fn at(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost stage name, if any.
    pub fn stage(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
