use std::path::Path;

use dra_core::DraError;

use crate::container::ContainerError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] DraError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {message}")]
    Image { path: String, message: String },
    #[error("dataset layout error: {0}")]
    Layout(String),
    #[error("config error at line {line}: {message}")]
    ConfigAt { line: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing model: {0}")]
    MissingModel(String),
    #[error("checkpoint does not match its configuration: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}
