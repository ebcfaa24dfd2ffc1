//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A call-contract violation: mismatched lengths, out-of-range indices,
    /// invalid configuration values.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The feedback polynomial has a root on or outside the unit circle.
    #[error("unstable filter: spectral radius {rho} >= {limit}")]
    Unstable { rho: f64, limit: f64 },

    /// A value fell outside the open interval on which the output
    /// nonlinearity can be inverted.
    #[error("value {value} outside invertible range ({lo}, {hi})")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    /// A subject whose scores have zero variance cannot be Z-normalized.
    #[error("subject {subject} has zero score variance")]
    DegenerateSubject { subject: usize },

    /// Every subject was flagged as an outlier at one sample point.
    #[error("all subjects are outliers at video {video}, t={t}")]
    AllOutliers { video: usize, t: usize },

    /// Attaches (trace, t) context to an error raised inside a per-sample
    /// computation, e.g. inversion failures while pinning initial states.
    #[error("trace {trace}, t={t}: {source}")]
    TraceContext {
        trace: usize,
        t: usize,
        #[source]
        source: Box<Error>,
    },

    /// A file could not be parsed; `line` is 1-based.
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps `self` with the (trace, t) pair it was raised for. `t` is 1-based.
    pub fn in_trace(self, trace: usize, t: usize) -> Error {
        Error::TraceContext {
            trace,
            t,
            source: Box::new(self),
        }
    }
}
