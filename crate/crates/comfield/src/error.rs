use std::path::PathBuf;

use comfield_core::Error as CoreError;

/// Harness failures, each mapped to a distinct process exit code.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("training diverged at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("selftest failed: {0} check(s)")]
    SelftestFailed(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(CoreError),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }

    pub fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        HarnessError::Malformed { path: path.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    /// 2 configuration or usage, 3 malformed input file, 4 divergence,
    /// 5 selftest failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Malformed { .. } => 3,
            HarnessError::Divergence { .. } => 4,
            HarnessError::SelftestFailed(_) => 5,
            HarnessError::Io { .. } => 1,
            HarnessError::Core(e) => match e {
                CoreError::Config(_) => 2,
                CoreError::Divergence { .. } => 4,
                _ => 1,
            },
        }
    }
}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Divergence { iteration, .. } => HarnessError::Divergence { iteration },
            CoreError::Config(msg) => HarnessError::Config(msg),
            other => HarnessError::Core(other),
        }
    }
}
