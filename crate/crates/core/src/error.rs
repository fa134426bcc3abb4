use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (jitter escalated to {max_jitter:e} without success)")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid label {label} for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("loss {loss} requires {what}")]
    MissingTargets { loss: &'static str, what: &'static str },

    #[error("knowledge-distillation loss requires a teacher")]
    MissingTeacher,

    #[error("kernel is degenerate: {degenerate} of {attempts} probes had vanishing kernel products")]
    DegenerateKernel { degenerate: usize, attempts: usize },

    #[error("unstable Euler step: step*eta*lambda_max/n = {ratio} (must be < 2)")]
    UnstableStep { ratio: f64 },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("config validation error for `{key}`: {message}")]
    Validation { key: String, message: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("recipe {recipe}: {source}")]
    Recipe {
        recipe: String,
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

    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }

    /// True for errors caused by the experiment configuration itself.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Parse { .. } | Error::Validation { .. } | Error::InvalidSpec(_) => true,
            Error::Recipe { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
