use thiserror::Error;

use leak_nn::NnError;

/// Error type shared by every module of the crate.
///
/// Each variant maps to a stable machine-readable category (see
/// [`Error::category`]) that the command-line tool prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    /// A value violates a structural invariant (cyclic graph, bad index, shape).
    #[error("structural error: {0}")]
    Structural(String),
    /// User-supplied data is inconsistent (bad alignment, over-long sequence).
    #[error("input error: {0}")]
    Input(String),
    /// The run configuration is inconsistent with what was asked of it.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contraction error: {0}")]
    Contraction(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Structural(_) => "structural",
            Error::Input(_) => "input",
            Error::Config(_) => "config",
            Error::Contraction(_) => "contraction",
            Error::Schema(_) => "schema",
            Error::Numeric(_) => "numeric",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<NnError> for Error {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFinite { .. } => Error::Numeric(e.to_string()),
            _ => Error::Structural(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Schema(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
