use std::path::Path;

use thiserror::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{}line {line}: {message}", path_prefix(.path))]
    Parse { path: String, line: usize, message: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("not reproduced: {0}")]
    Reproducibility(String),
    #[error(transparent)]
    Core(#[from] aod_core::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Dimension(_) | CliError::Core(aod_core::Error::Config(_)) => EXIT_CONFIG,
            CliError::Io { .. }
            | CliError::Parse { .. }
            | CliError::Core(aod_core::Error::Io(_))
            | CliError::Core(aod_core::Error::Parse { .. }) => EXIT_IO,
            _ => EXIT_FAILURE,
        }
    }

    /// Attaches a file name to parse errors raised while reading `path`.
    pub fn in_file(self, path: &Path) -> Self {
        match self {
            CliError::Core(aod_core::Error::Parse { line, message }) | CliError::Parse { line, message, .. } => {
                CliError::Parse {
                    path: path.display().to_string(),
                    line,
                    message,
                }
            }
            other => other,
        }
    }
}

fn path_prefix(path: &str) -> String {
    if path.is_empty() {
        String::new()
    } else {
        format!("{path}: ")
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn parse_err(line: usize, message: impl Into<String>) -> CliError {
    CliError::Parse {
        path: String::new(),
        line,
        message: message.into(),
    }
}
