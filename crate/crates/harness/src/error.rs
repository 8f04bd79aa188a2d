use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot parse {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("cannot serialize configuration: {0}")]
    ConfigWrite(#[from] toml::ser::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: row {row}, column {column}: {reason}")]
    PvCell {
        path: PathBuf,
        row: usize,
        column: String,
        reason: String,
    },

    #[error("{path}: {reason}")]
    PvShape { path: PathBuf, reason: String },

    #[error(transparent)]
    Model(#[from] lfsda_core::Error),

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),

    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{failed} of {total} conditions failed, see failures.json")]
    Conditions { failed: usize, total: usize },
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status by failure category.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::ConfigParse { .. } | HarnessError::ConfigWrite(_) => 2,
            HarnessError::Io { .. } | HarnessError::Csv(_) | HarnessError::Json(_) => 3,
            HarnessError::PvCell { .. } | HarnessError::PvShape { .. } => 4,
            HarnessError::Model(_) | HarnessError::Conditions { .. } => 5,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
