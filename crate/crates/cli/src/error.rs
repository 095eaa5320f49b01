use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CONTRACT: i32 = 4;
pub const EXIT_INVALID: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tade::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        use tade::Error as E;
        match self {
            CliError::Io { .. } | CliError::Core(E::Io(_)) => EXIT_IO,
            CliError::Core(E::TrainingDiverged { .. } | E::AdaptationDiverged { .. } | E::Numeric(_)) => {
                EXIT_DIVERGED
            }
            CliError::Core(E::Contract(_)) => EXIT_CONTRACT,
            _ => EXIT_INVALID,
        }
    }
}

/// Attaches the offending path to core I/O errors.
pub(crate) trait WithPath<T> {
    fn at(self, path: &std::path::Path) -> CliResult<T>;
}

impl<T> WithPath<T> for tade::Result<T> {
    fn at(self, path: &std::path::Path) -> CliResult<T> {
        self.map_err(|e| match e {
            tade::Error::Io(source) => CliError::io(path, source),
            other => CliError::Core(other),
        })
    }
}

impl<T> WithPath<T> for io::Result<T> {
    fn at(self, path: &std::path::Path) -> CliResult<T> {
        self.map_err(|e| CliError::io(path, e))
    }
}
