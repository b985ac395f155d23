use std::path::PathBuf;

/// Errors raised across the crate.
///
/// `Validation` covers bad inputs and configurations (CLI exit code 2);
/// everything else is a runtime or stage failure (exit code 3).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {field}: {message}")]
    Validation { field: String, message: String },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("index {index} out of range (limit {limit}) at {position}")]
    Index {
        index: usize,
        limit: usize,
        position: String,
    },

    #[error("non-finite loss in {stage}: {diagnostics}")]
    NonFinite { stage: String, diagnostics: String },

    #[error("missing checkpoint for stage {stage}: {path}")]
    MissingCheckpoint { stage: String, path: PathBuf },

    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. } | Error::Shape { .. } | Error::Index { .. } | Error::Config(_)
        )
    }
}
