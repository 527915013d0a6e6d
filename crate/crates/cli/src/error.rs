use std::path::{Path, PathBuf};

use ders_core::train::TrainAbort;
use ders_core::DersError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] DersError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    /// Training stopped early; the partial metrics trace is kept.
    #[error(transparent)]
    Aborted(#[from] TrainAbort),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 2 config, 3 state, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(DersError::Config(_)) => 2,
            CliError::Core(DersError::State(_)) => 3,
            CliError::Core(DersError::Numeric { .. }) => 4,
            CliError::Aborted(a) => CliError::Core(a.error.clone()).exit_code(),
            _ => 1,
        }
    }
}
