use thiserror::Error;

/// Failures of a command, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration, missing inputs.
    #[error("usage: {0}")]
    Usage(String),
    /// A property, tolerance or gradient check did not hold.
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] dgdetr_core::Error),
    #[error(transparent)]
    Toydetr(#[from] dgdetr_toydetr::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    /// 0 success, 1 failed check or runtime failure, 2 usage or config.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Toydetr(dgdetr_toydetr::Error::Checkpoint(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
