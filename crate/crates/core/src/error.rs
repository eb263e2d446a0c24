use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("measure has no atom with positive weight")]
    EmptyMeasure,

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("Cholesky factorization failed after jitter ladder {jitters:?}")]
    Cholesky { jitters: Vec<f64> },

    #[error("embeddings computed against different references ({0} vs {1})")]
    RefVersionMismatch(String, String),

    #[error(
        "forward solve needed {iterations} iterations but unroll cap is {cap}; \
         use finite differences or raise the cap"
    )]
    UnrollCapExceeded { iterations: usize, cap: usize },

    #[error("unsupported format tag {found:?} (expected {expected:?})")]
    Format { expected: String, found: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for numerical failures (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::Cholesky { .. } | Error::UnrollCapExceeded { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
