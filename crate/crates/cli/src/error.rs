use std::fmt;

use packetlm::codec::CodecError;
use packetlm::datasets::DatasetError;
use packetlm::metrics::MetricsError;
use packetlm::trainer::CheckpointError;
use packetlm::{ModelError, SchemaError, TrainError};

/// Failure of a command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// Unreadable, missing or inconsistent data (exit 2).
    Data(String),
    /// Training diverged or failed (exit 3).
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Training(_) => 3,
        }
    }

    pub fn context(self, what: impl fmt::Display) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{what}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{what}: {m}")),
            CliError::Training(m) => CliError::Training(format!("{what}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Training(m) => write!(f, "training failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<SchemaError> for CliError {
    fn from(e: SchemaError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidSpec(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::Model(ModelError::InvalidConfig(_)) => CliError::Usage(e.to_string()),
            TrainError::Model(_) | TrainError::Checkpoint(_) => CliError::Data(e.to_string()),
            other => CliError::Training(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// I/O failure on `path`, reported as a data error naming the path.
pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
