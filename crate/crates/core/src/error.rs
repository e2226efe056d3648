use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("manifest error at `{field}`: {message}")]
    Manifest { field: String, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("row {row} is not a probability distribution: {reason}")]
    Simplex { row: usize, reason: String },

    #[error("covariance of component {component} is not positive definite after regularization")]
    SingularCovariance { component: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: u32, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn manifest(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Manifest {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for this error: 2 for numerical failures, 1 for
    /// everything caused by bad input or configuration.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::SingularCovariance { .. } => 2,
            _ => 1,
        }
    }
}
