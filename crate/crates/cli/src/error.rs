use abm_core::Error as CoreError;
use thiserror::Error;

/// Failures of a CLI command, each mapped to a documented exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    /// 2 usage, 3 I/O, 4 format or capability, 5 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::GradCheck(_) => 5,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Input(_) => 2,
                CoreError::Io { .. } | CoreError::Image { .. } => 3,
                CoreError::Format(_)
                | CoreError::Integrity(_)
                | CoreError::Capability(_)
                | CoreError::Vocabulary(_) => 4,
                CoreError::Numeric(_) => 5,
                _ => 1,
            },
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Core(CoreError::io(path, e))
}
