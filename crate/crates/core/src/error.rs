use thiserror::Error;

use crate::estimate::FitResult;
use crate::integrate::Scheme;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which end of a confidence interval a search was looking for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Lower,
    Upper,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::Lower => f.write_str("lower"),
            Side::Upper => f.write_str("upper"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical domain error in component {component}: {detail}")]
    Domain { component: usize, detail: String },

    #[error("integration failed at node {node}: {source}")]
    Integration {
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("reference solver cannot reach the requested accuracy near t = {t} (step {step:e})")]
    AccuracyUnreachable { t: f64, step: f64 },

    #[error("scheme {scheme} is not supported: {reason}")]
    UnsupportedScheme { scheme: Scheme, reason: &'static str },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("line search found no step with a finite objective")]
    NoFiniteStep,

    #[error("no {side} bracket for parameter {index} within {doublings} doublings")]
    UnboundedInterval {
        index: usize,
        side: Side,
        doublings: usize,
    },

    #[error("IRLS stopped after {} recorded iterations: {source}", partial.objective_trace.len())]
    IrlsFailed {
        partial: Box<FitResult>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by invalid input rather than numerical failure.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::UnsupportedScheme { .. } => true,
            Error::Integration { source, .. } | Error::IrlsFailed { source, .. } => {
                source.is_config()
            }
            _ => false,
        }
    }
}
