use std::path::PathBuf;

use kvlp_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {file}:{line}: {msg}")]
    Format { file: String, line: usize, msg: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("token id {id} outside vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint incompatible: {0}")]
    Compatibility(String),
    #[error("non-finite {component} loss at step {step}")]
    NonFiniteLoss { component: String, step: usize },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
