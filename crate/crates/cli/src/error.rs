use std::path::PathBuf;

use thiserror::Error;

/// Stage-level failures. Per-case problems are collected in [`crate::stages::StageOutcome`] instead.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("no cases found in {0}")]
    EmptyCohort(PathBuf),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed report {path}: {reason}")]
    Report { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] hac_refine::Error),
}

impl CliError {
    /// 2 for configuration and usage problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::EmptyCohort(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
