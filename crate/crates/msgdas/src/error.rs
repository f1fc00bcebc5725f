use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Malformed or truncated dataset file.
    #[error("{}: {detail} (byte offset {offset})", path.display())]
    Ingestion { path: PathBuf, offset: u64, detail: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{} already exists; pass --force to overwrite", .0.display())]
    OutputExists(PathBuf),
    #[error("selftest failed: {0}")]
    Selftest(String),
    #[error(transparent)]
    Core(#[from] msgdas_core::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, detail: impl ToString) -> HarnessError {
    HarnessError::Format {
        path: path.into(),
        detail: detail.to_string(),
    }
}
