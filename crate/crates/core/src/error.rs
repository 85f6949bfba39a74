use thiserror::Error;

/// Error taxonomy shared across the crate.
///
/// The CLI maps variants onto exit codes: configuration and data problems
/// are user errors (exit 2), artifact incompatibilities are exit 3, and
/// everything else is an internal failure (exit 1).
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or axis mismatch.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid configuration value or malformed config file.
    #[error("config error: {0}")]
    Config(String),

    /// Violated operation precondition (caller bug).
    #[error("contract error: {0}")]
    Contract(String),

    /// Unusable input data (empty dataset, missing samples, ...).
    #[error("data error: {0}")]
    Data(String),

    /// I/O failure, annotated with the path involved.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Artifact (checkpoint/dataset) has an incompatible format or version.
    #[error("incompatible artifact: {0}")]
    Incompat(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
