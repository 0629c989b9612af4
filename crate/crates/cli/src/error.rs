use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("i/o error at {}: {message}", path.display())]
    Io { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing input {}: {hint}", path.display())]
    MissingInput { path: PathBuf, hint: String },

    #[error("schema error in {}: {message}", path.display())]
    Schema { path: PathBuf, message: String },

    #[error("energy distribution over {samples} states is empty")]
    EmptyDistribution { samples: usize },

    #[error("degenerate energy distribution: tau_low {tau_low} is not below tau_high {tau_high} ({samples} samples)")]
    DegenerateDistribution { tau_low: f64, tau_high: f64, samples: usize },

    #[error(transparent)]
    Core(#[from] dualflow::Error),
}

/// Machine-readable failure record written to stderr by the binary.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.to_path_buf(), message: err.to_string() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::MissingInput { .. } => "missing_input",
            CliError::Schema { .. } => "schema",
            CliError::EmptyDistribution { .. } => "empty_distribution",
            CliError::DegenerateDistribution { .. } => "degenerate_distribution",
            CliError::Core(_) => "core",
        }
    }

    pub fn record(&self) -> ErrorRecord {
        let path = match self {
            CliError::Io { path, .. } | CliError::MissingInput { path, .. } | CliError::Schema { path, .. } => {
                Some(path.display().to_string())
            }
            _ => None,
        };
        ErrorRecord { error: self.kind(), message: self.to_string(), path }
    }
}
