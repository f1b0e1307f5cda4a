//! Pipeline orchestration behind the `roadsim` binary.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod seeds;

use thiserror::Error;

pub use config::{Config, ConfigError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}
