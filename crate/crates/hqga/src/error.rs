use std::path::PathBuf;

use hqga_core::Error as CoreError;

pub type Result<T, E = IoError> = std::result::Result<T, E>;

/// Failures of the file formats and command plumbing. Each maps onto one
/// of the documented process exit codes through [`IoError::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing array {name:?}")]
    MissingArray { path: PathBuf, name: String },
    #[error("{path}: array {name:?} has shape {found:?}, expected {expected:?}")]
    Shape {
        path: PathBuf,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{path}: bad manifest: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("{path}: not a readable array container: {reason}")]
    Container { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    Json { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: image encoding failed: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl IoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn manifest(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Self::Manifest { path: path.into(), reason: reason.to_string() }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Self::Json { path: path.into(), reason: reason.to_string() }
    }

    /// 2 for configuration problems, 4 for divergence, 3 for anything
    /// wrong with the data or files on disk.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(CoreError::Config(_)) => 2,
            Self::Core(CoreError::Divergence(_)) => 4,
            _ => 3,
        }
    }
}
