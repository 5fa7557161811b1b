use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: {msg}")]
    Invalid { context: &'static str, msg: String },
    #[error("{context}: dimension mismatch {lhs:?} vs {rhs:?}")]
    DimMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] strokeseg_tensor::TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(context: &'static str, msg: impl Into<String>) -> Error {
    Error::Invalid {
        context,
        msg: msg.into(),
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
