use thiserror::Error;

use crate::lp::LpStatus;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("polytope is empty")]
    Empty,

    #[error("linear program is unbounded: {0}")]
    Unbounded(String),

    #[error("{context}: solver returned {status:?}")]
    Solver { context: String, status: LpStatus },

    #[error("infeasible energy requirement: need {required} kWh, window allows {available} kWh")]
    InfeasibleEnergy { required: f64, available: f64 },

    #[error("point outside inner approximation (residual {0:.3e})")]
    OutsideInner(f64),

    #[error("matrix is not strictly diagonally dominant (margin {0:.3e})")]
    NotDominant(f64),

    #[error("singular matrix")]
    Singular,

    #[error("clock label {label} precedes origin {origin}")]
    BeforeOrigin { label: String, origin: String },
}

impl Error {
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, Error::Solver { .. })
    }

    pub(crate) fn solver(context: &str, status: LpStatus) -> Self {
        Error::Solver { context: context.to_string(), status }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
