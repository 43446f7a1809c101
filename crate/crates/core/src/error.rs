use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: &'static str },

    #[error("{file}:{line}: {message}")]
    Validation {
        file: String,
        line: u64,
        message: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("no positive instances in training set")]
    NoPositiveInstances,

    #[error(
        "insufficient donors: pool of {available} non-relapse windows cannot cover {required}"
    )]
    InsufficientDonors { required: usize, available: usize },

    #[error("zero variance")]
    ZeroVariance,

    #[error("test-patient leakage: {0}")]
    Leakage(String),

    #[error("malformed parameter file: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed input data rather than numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. } | Error::Data(_) | Error::Csv(_) | Error::Io { .. }
        )
    }
}
