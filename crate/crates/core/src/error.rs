use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Step size fell below the configured minimum. Carries the last accepted state.
    #[error("geodesic solver diverged at t={t:.6} (step {step:.3e} below minimum)")]
    Divergence { t: f64, step: f64, state: Vec<f64> },

    #[error("geodesic solver exceeded its budget of {max_steps} steps at t={t:.6}")]
    Budget { max_steps: usize, t: f64 },

    #[error("denoising step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at step {step}: loss is {loss}")]
    Training { step: usize, loss: f64 },

    /// A run completed but its checks failed.
    #[error("{0}")]
    Failed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("caption provider error (status {status:?}): {message}")]
    Provider { status: Option<u16>, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure while doing the work. The CLI maps these to exit code 1.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Dimension { .. }
            | Error::Contract(_)
            | Error::Degenerate(_)
            | Error::Config(_)
            | Error::Parse(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Checkpoint(msg) => msg.starts_with("missing"),
            Error::AtStep { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}
