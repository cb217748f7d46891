use std::path::PathBuf;

/// Errors surfaced by the command-line runner.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] smsa_core::Error),
    #[error("invalid `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file at byte offset {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },
    #[error("{path}: {reason}")]
    Input { path: PathBuf, reason: String },
    #[error("{0}")]
    Failed(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for configuration errors, 3 for numerical
    /// failures, 4 for unsupported attention depth, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use smsa_core::Error as E;
        match self {
            CliError::Config { .. } => 2,
            CliError::Core(E::Config { .. } | E::InvalidDepth { .. } | E::InvalidLabel { .. }) => 2,
            CliError::Core(E::NonFinite { .. } | E::RetractionFailure { .. }) => 3,
            CliError::Core(E::UnsupportedDepth { .. }) => 4,
            _ => 1,
        }
    }
}
