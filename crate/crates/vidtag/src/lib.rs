//! File formats, synthetic data, configuration, checkpoints and the training
//! driver around `vidtag-core`.

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod example;
pub mod synthetic;
pub mod tfrecord;
pub mod train;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Record { path: PathBuf, source: tfrecord::RecordError },
    #[error("{path}: record {index}: {source}")]
    Schema { path: PathBuf, index: usize, source: example::SchemaError },
    #[error(transparent)]
    Model(#[from] vidtag_core::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
