use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("persistence error at {path}: {source}")]
    Persistence {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: non-finite value in `{term}`")]
    Numeric { term: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Persistence {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, printed by the command-line tool.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Persistence { .. } => "persistence",
            Error::Format(_) => "format",
            Error::Shape(_) => "shape",
            Error::Argument(_) => "argument",
            Error::Config(_) => "config",
            Error::Numeric { .. } => "numeric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Evaluation(_) => "evaluation",
        }
    }

    /// Process exit code for the category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Persistence { .. } => 2,
            Error::Format(_) => 3,
            Error::Shape(_) => 4,
            Error::Argument(_) => 5,
            Error::Config(_) => 6,
            Error::Numeric { .. } => 7,
            Error::Checkpoint(_) => 8,
            Error::Evaluation(_) => 9,
        }
    }
}
