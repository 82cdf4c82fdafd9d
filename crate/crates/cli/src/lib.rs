//! Command implementations and the review HTTP service behind the `caliper` binary.

pub mod commands;
pub mod server;

use caliper_core::CaliperError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CaliperError),

    #[error("usage: {0}")]
    Usage(String),

    #[error("server error: {0}")]
    Server(String),
}

/// Machine-readable error line written to stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    /// sysexits-style codes: 64 usage, 65 bad data, 66 missing input, 70 internal, 74 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 64,
            CliError::Server(_) => 70,
            CliError::Core(e) => match e {
                CaliperError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 66,
                CaliperError::Io { .. } => 74,
                CaliperError::TrainingDiverged(_) => 70,
                _ => 65,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Server(_) => "server",
            CliError::Core(e) => match e {
                CaliperError::InvalidInput(_) => "invalid_input",
                CaliperError::IncompleteSet { .. } => "incomplete_set",
                CaliperError::UnknownLandmark { .. } => "unknown_landmark",
                CaliperError::OutOfBounds { .. } => "out_of_bounds",
                CaliperError::DegenerateChannel => "degenerate_channel",
                CaliperError::Config(_) => "config",
                CaliperError::TrainingDiverged(_) => "training_diverged",
                CaliperError::InvalidSpec(_) => "invalid_spec",
                CaliperError::UndefinedIcc(_) => "undefined_icc",
                CaliperError::Manifest(_) => "manifest",
                CaliperError::Checkpoint(_) => "checkpoint",
                CaliperError::NotFound(_) => "not_found",
                CaliperError::Conflict { .. } => "conflict",
                CaliperError::Io { .. } => "io",
                CaliperError::Image(_) => "image",
                CaliperError::Json(_) => "json",
            },
        }
    }

    pub fn record(&self) -> ErrorRecord {
        ErrorRecord {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
