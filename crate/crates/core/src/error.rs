use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for a primitive.
    #[error("dimension error in `{op}`: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller violated an operation's precondition.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unknown operation `{0}`")]
    Catalog(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    /// Loss became NaN or infinite during a search.
    #[error("search diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("config schema violation: {0}")]
    Schema(String),

    #[error("artifact integrity check failed for {path}: {detail}")]
    Integrity { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
