use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid adapter state: {0}")]
    InvalidState(String),

    /// The pretrained weight has (near) zero energy on the projected subspace.
    #[error("degenerate projection: denominator {0:e} is below 1e-12")]
    DegenerateProjection(f64),

    /// `line` is 0 for values that came from an override rather than a file.
    #[error("{}: {message}", config_origin(*.line))]
    Config { line: usize, message: String },

    #[error("malformed {what} in {path}: {message}")]
    Format {
        what: &'static str,
        path: PathBuf,
        message: String,
    },

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn config_origin(line: usize) -> String {
    if line == 0 {
        "config override".to_string()
    } else {
        format!("config line {line}")
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
