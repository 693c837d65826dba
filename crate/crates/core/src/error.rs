use thiserror::Error;

use crate::model::ParamVector;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("model evaluation failed: {0}")]
    ModelEvaluation(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("insufficient data: need at least {required} observations, got {available}")]
    InsufficientData { required: usize, available: usize },

    #[error("observation {row} is not covered by any partition cell")]
    UncoveredPoint { row: usize },

    #[error("empty cell: {0}")]
    EmptyCell(String),

    #[error("singular design matrix")]
    SingularDesign,

    #[error("degenerate fit: residual scale is zero (beta = {beta:?})")]
    DegenerateFit { beta: Vec<f64> },

    #[error("non-finite objective at the starting point")]
    InvalidStart,

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    ConvergenceFailure {
        last: ParamVector,
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("estimated information matrix is singular")]
    SingularInformation,

    #[error("adjusted covariance has a negative eigenvalue {min_eigenvalue:e}")]
    CovarianceConstruction { min_eigenvalue: f64 },

    #[error("degrees of freedom must be positive, got {0}")]
    InvalidDf(i64),

    #[error("experiment invalid: {failed} of {total} replications failed")]
    ExperimentInvalid { failed: usize, total: usize },
}

impl Error {
    /// Short stable code used when recording failed Monte Carlo replications.
    pub fn reason_code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidParameter(_) | Error::ModelEvaluation(_) => "model_evaluation",
            Error::InvalidData(_) => "invalid_data",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::UncoveredPoint { .. } => "uncovered_point",
            Error::EmptyCell(_) => "empty_cell",
            Error::SingularDesign | Error::DegenerateFit { .. } => "degenerate_fit",
            Error::InvalidStart | Error::ConvergenceFailure { .. } => "convergence_failure",
            Error::SingularInformation => "singular_information",
            Error::CovarianceConstruction { .. } => "covariance_construction",
            Error::InvalidDf(_) => "invalid_df",
            Error::ExperimentInvalid { .. } => "experiment_invalid",
        }
    }
}
