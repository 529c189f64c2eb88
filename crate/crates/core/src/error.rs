use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument or option is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Shapes, resolutions or model pairings that do not fit together.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A direction vector with zero length was fed to a cosine loss.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// NaN or infinity appeared where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) => 2,
            Error::Io { .. } | Error::Format(_) => 3,
            Error::Contract(_) | Error::Degenerate(_) | Error::NonFinite(_) => 4,
        }
    }
}
