use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimensions or shapes that do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// NaN/inf where a finite number was required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was called before its precondition held.
    #[error("precondition failed: {0}")]
    Precondition(String),
    /// Environment protocol violation, e.g. stepping a finished episode.
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
