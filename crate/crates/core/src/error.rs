use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("gaussian cloud is empty")]
    EmptyCloud,
    #[error("no views supplied")]
    NoViews,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("timestamps are not strictly increasing: {0}")]
    NonMonotonicTime(String),
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("innovation covariance is numerically singular (condition {0:e})")]
    SingularInnovation(f64),
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("image too small for an 11x11 window: {width}x{height}")]
    TooSmall { width: usize, height: usize },
    #[error("no foreground pixel above threshold")]
    NoForeground,
    #[error("optimization diverged: {0}")]
    Diverged(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("input mismatch: {0}")]
    InputMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
