use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot parse exponent `{0}` (expected -inf, an integer, p/q, or a decimal)")]
    ParseExponent(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("fit needs at least 2 points, got {0}")]
    TooFewPoints(usize),

    #[error("log-log fit needs positive values; point (n={n}, value={value}) is not")]
    NonPositive { n: f64, value: f64 },

    #[error("no stable learning rate at width {width} for init {scheme}: every trial diverged")]
    NoStableLr { width: usize, scheme: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: row {row}: {msg}")]
    Record { path: PathBuf, row: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
