//! Dataset generation, training, evaluation and uncertainty propagation driven
//! by one TOML experiment file.

pub mod commands;
pub mod config;
pub mod data;
pub mod experiment;
pub mod manifest;

use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    /// A stored artifact does not belong to the current configuration or was modified.
    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch { what: String, expected: String, found: String },

    #[error("missing artifact {0}; run the producing command first")]
    Missing(String),

    #[error(transparent)]
    Core(#[from] cgsur_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use cgsur_core::Error as E;
        match self {
            CliError::Config(_) | CliError::HashMismatch { .. } | CliError::Missing(_) => 2,
            CliError::Core(e) => match e {
                E::InvalidSize(_) | E::InvalidParameter(_) | E::GridMismatch { .. } | E::EmptyData => 2,
                E::Io(_) | E::Json(_) | E::Format(_) => 1,
                _ => 3,
            },
            CliError::Io(_) | CliError::Json(_) => 1,
        }
    }
}
