use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid labels, flags or configuration keys.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input outside the domain an operation accepts (empty group, bad probability, ...).
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    /// Factorization failures and non-finite intermediate values.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("dataset generation failed after {rejections} consecutive rejections")]
    Generation { rejections: usize },
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
