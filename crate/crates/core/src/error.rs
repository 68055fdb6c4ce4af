use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report. Each variant maps to a stable
/// machine-readable code used by the CLI error line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("fusion error: {0}")]
    Fusion(String),
    #[error("sequence error: {0}")]
    Sequence(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },
    #[error("checksum error: {0}")]
    Checksum(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("file error: {0}")]
    File(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E_SHAPE",
            Error::Alignment(_) => "E_ALIGNMENT",
            Error::Resolution(_) => "E_RESOLUTION",
            Error::Sampling(_) => "E_SAMPLING",
            Error::Config(_) => "E_CONFIG",
            Error::Fusion(_) => "E_FUSION",
            Error::Sequence(_) => "E_SEQUENCE",
            Error::Loss(_) => "E_LOSS",
            Error::Evaluation(_) => "E_EVAL",
            Error::Training { .. } => "E_TRAINING",
            Error::Checksum(_) => "E_CHECKSUM",
            Error::Generation(_) => "E_GENERATION",
            Error::Argument(_) => "E_ARGUMENT",
            Error::Metric(_) => "E_METRIC",
            Error::File(_) => "E_FILE",
            Error::Json(_) => "E_JSON",
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

/// An I/O error with the offending path in its message.
pub(crate) fn path_err(path: &std::path::Path, e: std::io::Error) -> Error {
    Error::File(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}
