use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular input: {0}")]
    Singular(String),

    #[error("degenerate plane: {0}")]
    DegeneratePlane(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid variance: {0}")]
    InvalidVariance(String),

    #[error("invalid evidence: {0}")]
    InvalidEvidence(String),

    #[error("ensemble mismatch: {0}")]
    EnsembleMismatch(String),

    /// Geometry failure inside one output head of the network.
    #[error("head {head}: {source}")]
    Head {
        head: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::EnsembleMismatch(_) => 2,
            Error::Numeric(_)
            | Error::InvalidVariance(_)
            | Error::InvalidEvidence(_)
            | Error::Singular(_)
            | Error::DegeneratePlane(_) => 3,
            Error::Head { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
