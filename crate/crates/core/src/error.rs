use std::io;

use thiserror::Error;

/// Every failure the library can report. The CLI maps `Validation`-like
/// variants to exit code 1 and everything else to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error("sampler error: {0}")]
    Sampler(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Format(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
