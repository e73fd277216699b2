use std::path::Path;

use thiserror::Error;

pub type CliResult<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(String),

    #[error("json: {0}")]
    Json(String),

    #[error("missing column `{column}`")]
    MissingColumn { column: String },

    #[error("line {line}: cannot parse `{value}` in column `{column}`")]
    Parse { line: u64, column: String, value: String },

    #[error("line {line}: unknown item `{item}`")]
    UnknownItem { line: u64, item: String },

    #[error("line {line}: item {item} level {level} outside 0..{n_levels}")]
    Level {
        line: u64,
        item: String,
        level: i64,
        n_levels: usize,
    },

    #[error("line {line}: subject {subject} covariate `{covariate}` differs from line {first_line}")]
    InconsistentCovariate {
        line: u64,
        first_line: u64,
        subject: String,
        covariate: String,
    },

    /// Configuration schema violation, reported at the first failing path.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Core(#[from] lirt_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Csv(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Json(e.to_string())
    }
}
