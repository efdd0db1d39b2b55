use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing artifact {}: {reason}", path.display())]
    MissingArtifact { path: PathBuf, reason: String },
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Io { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::MissingArtifact { .. } => 4,
        }
    }

    pub fn missing(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CliError::MissingArtifact { path: path.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.into(), message: err.to_string() }
    }
}

impl From<prognos_core::io::IoError> for CliError {
    fn from(e: prognos_core::io::IoError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<prognos_core::search::SearchError> for CliError {
    fn from(e: prognos_core::search::SearchError) -> Self {
        use prognos_core::search::SearchError;
        match e {
            SearchError::AllDisqualified => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<prognos_core::ensemble::EnsembleError> for CliError {
    fn from(e: prognos_core::ensemble::EnsembleError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<prognos_core::metrics::MetricsError> for CliError {
    fn from(e: prognos_core::metrics::MetricsError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<prognos_core::coxfit::CoxError> for CliError {
    fn from(e: prognos_core::coxfit::CoxError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<prognos_core::meta::MetaError> for CliError {
    fn from(e: prognos_core::meta::MetaError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
