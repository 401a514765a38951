use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backends::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid option label `{0}`")]
    InvalidLabel(String),

    #[error("{requested} options requested but at most {max} are supported")]
    Capacity { requested: usize, max: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("model output did not follow the option template: {0}")]
    GenerationFormat(String),

    #[error("could not parse model output ({reason}): {raw:?}")]
    Parse { reason: String, raw: String },

    #[error("dataset line {line}: {reason}")]
    Dataset { line: usize, reason: String },

    #[error("knowledge base line {line}: {reason}")]
    CorruptLine { line: usize, reason: String },

    #[error("knowledge base schema mismatch: {0}")]
    Schema(String),

    #[error("entry `{entry}` has embedding dimension {found}, expected {expected}")]
    DimensionMismatch {
        entry: String,
        expected: usize,
        found: usize,
    },

    #[error("knowledge base build failed for every instance ({failed} failures)")]
    EmptyBuild { failed: usize },

    #[error("no ε̂ on the grid reaches target success {target} with n = {n}, δ = {delta}")]
    Infeasible { target: f64, n: usize, delta: f64 },

    #[error("calibration artifact was built with templates {artifact}, live templates are {live}")]
    TemplateVersionMismatch { artifact: String, live: String },

    // the wrapped error is part of the message, not a chained source, so
    // `{:#}` printing does not repeat it
    #[error("scenario `{id}`: {inner}")]
    Scenario { id: String, inner: Box<Error> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: &Path, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            cause,
        }
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn in_scenario(self, id: &str) -> Self {
        match self {
            e @ Error::Scenario { .. } => e,
            e => Error::Scenario {
                id: id.to_string(),
                inner: Box::new(e),
            },
        }
    }

    /// The innermost error, skipping scenario context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Scenario { inner, .. } => inner.root(),
            e => e,
        }
    }
}
