use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is missing or unusable.
    #[error("config field {field}: {message}")]
    Config { field: String, message: String },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("leakage audit failed: {0} violation(s)")]
    Leakage(usize),

    #[error("fit failed for repetition {repetition}, fold {fold}: {source}")]
    Fit {
        repetition: usize,
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("all {trials} search trials failed: {diagnostics:?}")]
    SearchFailed {
        trials: usize,
        diagnostics: Vec<String>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::InvalidInput(_) => "invalid_input",
            Error::Config { .. } => "config",
            Error::Degenerate(_) => "degenerate",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Leakage(_) => "leakage",
            Error::Fit { .. } => "fit",
            Error::SearchFailed { .. } => "search_failed",
            Error::Numerical(_) => "numerical",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// Config field the error refers to, if any.
    pub fn field(&self) -> Option<&str> {
        match self {
            Error::Config { field, .. } => Some(field),
            _ => None,
        }
    }

    /// Input problems (bad files, bad arguments) as opposed to failures
    /// that happen while computing on valid inputs.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::InvalidInput(_)
                | Error::Config { .. }
                | Error::DimensionMismatch(_)
                | Error::Io { .. }
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}
