use thiserror::Error;

use crate::expr::{DiffError, EvalError, ParseError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("flow evaluation failed at t={t}, x={x}, y={y}: {source}")]
    Flow {
        t: f64,
        x: f64,
        y: f64,
        source: EvalError,
    },
    #[error("{what} failed at step {step}: {source}")]
    AtStep {
        what: &'static str,
        step: usize,
        source: Box<Error>,
    },
    #[error("{what} became non-finite at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("functional is non-finite on path seed {seed} (control {control})")]
    NonFiniteFunctional { seed: u64, control: String },
    #[error("metadata audit: {0}")]
    Audit(String),
    #[error("quadrature: {0}")]
    Quadrature(String),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn at_step(what: &'static str, step: usize, source: Error) -> Self {
        Error::AtStep {
            what,
            step,
            source: Box::new(source),
        }
    }
}
