use std::path::PathBuf;

/// Errors produced by the grading pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid phantom spec: {0}")]
    Spec(String),

    #[error("landmark detection failed: {0}")]
    Detection(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Input(_) => "input",
            Error::Spec(_) => "spec",
            Error::Detection(_) => "detection",
            Error::Divergence(_) => "divergence",
            Error::Unsupported(_) => "unsupported",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
