use std::path::PathBuf;

use lambda_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {n_way} classes")]
    InvalidLabel { label: usize, n_way: usize },

    #[error("invalid pattern: {0}")]
    Pattern(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: parse error at byte offset {offset}: {detail}")]
    Parse {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("search: {0}")]
    Search(String),

    #[error("benchmark: {0}")]
    Bench(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
