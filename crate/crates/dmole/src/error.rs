use std::path::{Path, PathBuf};

use crate::config::FieldError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const RUNTIME: i32 = 2;
    pub const VALIDATION: i32 = 3;
    /// The command finished but some outputs are missing or degraded.
    pub const WARNINGS: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config not found: {}", .0.display())]
    ConfigNotFound(PathBuf),
    #[error("config could not be parsed: {0}")]
    Config(String),
    #[error("invalid configuration:\n{}", list(.0))]
    Invalid(Vec<FieldError>),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt or unreadable artifacts:\n{}", .0.iter().map(|s| format!("  {s}")).collect::<Vec<_>>().join("\n"))]
    Corrupt(Vec<String>),
    #[error("refusing to load {}: {reason}", .path.display())]
    Refused { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] dmole_core::Error),
    #[error("{0}")]
    Runtime(String),
}

fn list(errs: &[FieldError]) -> String {
    errs.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n")
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::ConfigNotFound(_) => exit::USAGE,
            CliError::Config(_) | CliError::Invalid(_) => exit::VALIDATION,
            CliError::Core(dmole_core::Error::InvalidSpec(_)) => exit::VALIDATION,
            _ => exit::RUNTIME,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
