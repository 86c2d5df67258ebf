use std::path::PathBuf;

use autodiff::AdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported or malformed WAV {path}: {msg}")]
    Wav { path: PathBuf, msg: String },
    #[error("signal too short: {len} samples, need at least {min}")]
    Length { len: usize, min: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite activation at frame {frame}")]
    NonFinite { frame: usize },
    #[error("Remez exchange did not converge after {iterations} iterations (error spread {spread:.3e})")]
    Convergence { iterations: usize, spread: f64 },
    #[error("unknown speaker id {0}")]
    UnknownSpeaker(usize),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at iteration {iteration} (spec {l_spec}, kl {l_kl}, total {total})")]
    NanLoss { iteration: usize, l_spec: f64, l_kl: f64, total: f64 },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
