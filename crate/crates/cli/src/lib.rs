//! Command implementations behind the `tnaf` binary, plus the run
//! configuration and checkpoint formats they share.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod oracles;

use thiserror::Error;
use tnaf_core::data::DataError;
use tnaf_core::flow::FlowError;
use tnaf_core::trainer::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("{0}")]
    Inversion(String),
    #[error("training failed: {0}")]
    Train(String),
    #[error("{0}")]
    Io(String),
    #[error("{0} oracle(s) failed")]
    OracleFailure(usize),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Corrupt(_) => 4,
            CliError::Inversion(_) => 5,
            CliError::Train(_) | CliError::Io(_) | CliError::OracleFailure(_) => 1,
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Inversion { .. } => CliError::Inversion(e.to_string()),
            FlowError::Config(m) => CliError::Config(m),
            other => CliError::Train(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            other => CliError::Train(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
