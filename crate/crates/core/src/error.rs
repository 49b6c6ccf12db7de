use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// The variants map onto the failure classes callers need to tell apart:
/// bad parameters and configuration (exit code 2 in the CLI) versus data,
/// I/O and numerical failures (exit code 3).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("intensity domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing resource: {0}")]
    Resource(String),

    #[error("non-finite loss for sample `{sample_id}` at epoch {epoch}: {detail}")]
    NonFinite {
        sample_id: String,
        epoch: usize,
        detail: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the user's configuration or arguments.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parameter(_))
    }
}
