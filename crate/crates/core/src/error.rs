use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular input: {0}")]
    Singular(String),

    /// An iterate left the region where the manifold projection is well defined.
    #[error("projection tube violation at iteration {iter}{}", agent.map(|a| format!(" (agent {a})")).unwrap_or_default())]
    TubeViolation { iter: usize, agent: Option<usize> },

    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn singular(msg: impl Into<String>) -> Self {
        Error::Singular(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for aborts caused by the iteration itself rather than by bad input.
    pub fn is_runtime_abort(&self) -> bool {
        matches!(self, Error::TubeViolation { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
