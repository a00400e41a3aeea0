use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    /// A caller-side precondition was violated (non-scalar loss, empty data, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Image or region too small for the 32x32 patch machinery.
    #[error("size error: {0}")]
    Size(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// The classifier found no artifact (A-type) patches to harvest patterns from.
    #[error(
        "no artifact patches detected: the classifier labelled every patch N; \
         annotate more A-type ROIs (artifacts on a uniform background) and rerun"
    )]
    NoArtifactPatches,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
