use std::path::{Path, PathBuf};

/// Failure classes of the command-line pipeline, each with a fixed exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Infeasible(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Diverged(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Infeasible(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<swp_core::Error> for CliError {
    fn from(e: swp_core::Error) -> Self {
        match e {
            swp_core::Error::NonFiniteLoss { .. } => CliError::Diverged(e.to_string()),
            swp_core::Error::InfeasibleBudget(_) => CliError::Infeasible(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
