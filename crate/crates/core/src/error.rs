use std::path::PathBuf;

use thiserror::Error;

use crate::distill::KdLossBundle;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Last power-iteration state, kept when the solver gives up.
#[derive(Debug, Clone)]
pub struct LastIterate {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    Index { id: usize, vocab: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes {found:?}; not a KTS checkpoint")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported KTS version {found:?} (expected KTS1)")]
    VersionMismatch { found: u8 },

    #[error(
        "truncated KTS payload: needed {needed} bytes at offset {offset}, {available} available"
    )]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("malformed KTS entry: {0}")]
    Malformed(String),

    #[error("power iteration did not converge after {iterations} iterations (residual {:.3e})", last.residual)]
    NonConvergence {
        iterations: usize,
        last: Box<LastIterate>,
    },

    #[error("factorizing `{weight}`: {source}")]
    Factorize {
        weight: String,
        #[source]
        source: Box<Error>,
    },

    #[error("target compression ratio {target} is infeasible; maximum achievable is {max_achievable:.3}")]
    Infeasible { target: f64, max_achievable: f64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: usize,
        last_finite: Option<Box<KdLossBundle>>,
    },

    #[error("trace mismatch at {location}: {detail}")]
    TraceMismatch { location: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonConvergence { .. } | Error::NonFiniteLoss { .. } => true,
            Error::Factorize { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
