use std::ops::Range;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("bad saliency file: {0}")]
    Format(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Remote oracle failure. `attempts` counts every request made,
    /// `retryable` is false once the server answered with a 4xx.
    #[error("transport error after {attempts} attempt(s): {msg}")]
    Transport {
        msg: String,
        attempts: u32,
        retryable: bool,
    },

    /// An oracle call failed while scoring the vertices in `vertices`.
    #[error("oracle failed on vertices {}..{}: {source}", vertices.start, vertices.end)]
    Oracle {
        vertices: Range<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error means a file was not there at all.
    pub fn is_not_found(&self) -> bool {
        matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
