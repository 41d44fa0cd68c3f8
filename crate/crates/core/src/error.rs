use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or inconsistent dimensions.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called outside its domain (empty split, M = 1 leave-one-out, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Broken internal contract, e.g. a forward cache that does not match the batch.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("non-finite parameters: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("failed to parse config: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("failed to serialize config: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
