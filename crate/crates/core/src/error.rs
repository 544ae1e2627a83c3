use thiserror::Error;

/// Errors raised anywhere in the simulator, training or evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions or configuration values that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),
    /// An element-distance computation left the valid geometric domain.
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("pilot overhead {pilot_s} s exceeds session length {session_s} s")]
    OverheadExceedsSession { pilot_s: f64, session_s: f64 },
    /// Malformed, truncated or inconsistent files on disk.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training error: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
