use std::path::PathBuf;

/// Exit code 2: the inputs were bad. Exit code 1: the tool itself failed.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),

    #[error("{path}: byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError::Input(message.into())
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError::Runtime(message.into())
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    /// 2 for anything wrong with user-supplied data, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Format { .. } => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<masklab_core::Error> for CliError {
    fn from(err: masklab_core::Error) -> Self {
        CliError::Input(err.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Runtime(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
