use std::path::PathBuf;

/// Failures of a command, sorted by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or unusable input data; exit code 2.
    #[error("{0}")]
    Usage(String),

    /// A check the command exists to run did not pass; exit code 1.
    #[error("{0}")]
    CheckFailed(String),

    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(dcmamber::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<dcmamber::Error> for CliError {
    fn from(e: dcmamber::Error) -> Self {
        use dcmamber::Error as E;
        match e {
            E::Config(_) | E::Parse { .. } | E::Io { .. } => CliError::Usage(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Write {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
