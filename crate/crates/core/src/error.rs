use thiserror::Error;

use crate::dsl::{ParseError, ValidationError};

pub type Result<T, E = GumError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GumError {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("model validation failed: {}", join_errors(.0))]
    Validation(Vec<ValidationError>),

    #[error("variable `{0}` is not present in the dataset")]
    MissingVariable(String),

    #[error("non-finite value in column `{column}` at row {row}")]
    NonFiniteValue { column: String, row: usize },

    #[error("response value {value} at observation {index} is outside the support of the {family} family")]
    SupportViolation {
        family: &'static str,
        index: usize,
        value: f64,
    },

    #[error("matrix is not positive definite after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("Newton system is singular")]
    SingularNewtonSystem,

    #[error("log-joint became non-finite")]
    NonFiniteLogJoint,

    #[error("posterior Hessian is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    HessianNotPD { min_eigenvalue: f64 },

    #[error("constraint shift denominator {value:e} is degenerate for function `{function}`")]
    DegenerateDenominator { function: String, value: f64 },

    #[error("ELBO became non-finite")]
    NonFiniteElbo,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GumError {
    /// Errors caused by the user's inputs (as opposed to numerical breakdowns).
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            GumError::NotPositiveDefinite { .. }
                | GumError::SingularNewtonSystem
                | GumError::NonFiniteLogJoint
                | GumError::HessianNotPD { .. }
                | GumError::DegenerateDenominator { .. }
                | GumError::NonFiniteElbo
        )
    }
}

fn join_errors(errs: &[ValidationError]) -> String {
    errs.iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
