use std::io;
use std::path::{Path, PathBuf};

/// Failures of the std layer. Core failures pass through unchanged.
#[derive(Debug, thiserror::Error)]
pub enum LekError {
    #[error(transparent)]
    Core(#[from] lek_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("media error: {0}")]
    Media(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("output directory {} is locked by another run", .0.display())]
    Locked(PathBuf),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: String, source: Box<LekError> },
}

pub type Result<T> = std::result::Result<T, LekError>;

impl LekError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Self::Format { path: path.to_path_buf(), msg: msg.into() }
    }

    /// Process exit status: 2 configuration, 3 backend, 4 numeric failure,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use lek_core::Error as E;
        match self {
            Self::Config(_) | Self::Core(E::Config(_)) => 2,
            Self::Core(E::Backend(_)) => 3,
            Self::Core(E::Training { .. } | E::Optimization { .. }) => 4,
            Self::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| LekError::io(path, e))
    }
}
