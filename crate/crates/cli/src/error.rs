use std::process::ExitCode;

use rswin_core::{CheckpointError, Error};
use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_INTERNAL: u8 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }

    pub fn code(&self) -> u8 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Data(_) => EXIT_DATA,
            Self::Numeric(_) => EXIT_NUMERIC,
            Self::Internal(_) => EXIT_INTERNAL,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => Self::Config(msg),
            Error::Data(_) | Error::Decode { .. } | Error::Io { .. } => Self::Data(msg),
            Error::NonFinite { .. } | Error::Numeric(_) => Self::Numeric(msg),
            Error::Checkpoint(CheckpointError::Incompatible(_) | CheckpointError::Dtype { .. }) => Self::Config(msg),
            Error::Checkpoint(_) => Self::Data(msg),
            Error::Shape(_) => Self::Internal(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
