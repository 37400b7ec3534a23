use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("{method} did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    Solver {
        method: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("Newton failure: {reason} after {iterations} iterations (residual history {history:?})")]
    Newton {
        reason: String,
        iterations: usize,
        history: Vec<f64>,
    },

    #[error("step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("simulation failed for theta = {theta:?}: {source}")]
    Sample {
        theta: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Parameter(_) => 2,
            Error::Io { .. } => 4,
            Error::Step { source, .. } | Error::Sample { source, .. } => match **source {
                Error::Io { .. } => 4,
                _ => 3,
            },
            _ => 3,
        }
    }

    /// Machine-parsable prefix used on the single error line the CLI prints.
    pub fn code(&self) -> &'static str {
        match self.exit_code() {
            2 => "E_CONFIG",
            4 => "E_IO",
            _ => "E_SOLVER",
        }
    }
}
