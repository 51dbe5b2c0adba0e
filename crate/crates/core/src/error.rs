use std::path::PathBuf;

/// Errors raised by the preference-flow engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numerical error at step {step}: {msg}")]
    Numerical { step: usize, msg: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A preference probability of exactly 0 or 1 makes the logit infinite.
    #[error("deterministic preference at ({i}, {j}): P = {p}, logit is infinite")]
    DeterministicPreference { i: usize, j: usize, p: f64 },

    #[error("infinite KL divergence: mass {mass} at index {index} where the reference has none")]
    InfiniteKl { index: usize, mass: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
