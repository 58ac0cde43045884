use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate route: {0}")]
    DegenerateRoute(String),

    #[error("position is {distance:.3} m from the route, outside the {corridor:.3} m corridor")]
    OutsideCorridor { distance: f64, corridor: f64 },

    #[error("cutoff {cutoff_hz} Hz is not below the Nyquist frequency of a {sample_rate_hz} Hz signal")]
    Nyquist { cutoff_hz: f64, sample_rate_hz: f64 },

    #[error("high-dynamics window: mean specific force {magnitude:.3} m/s^2 is outside the gravity-observable band")]
    HighDynamics { magnitude: f64 },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: unsupported format version {found} (this build reads version {supported})")]
    Version { path: PathBuf, found: u32, supported: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse { path: path.into(), message: message.to_string() }
    }
}
