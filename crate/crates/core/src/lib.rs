//! Chi-square goodness-of-fit tests for parametric conditional
//! distributions.
//!
//! Responses are mapped through the fitted conditional CDF (the Rosenblatt
//! transform), binned on `[0, 1]`, and cross-classified against a partition
//! of the covariate space. Pearson, score, likelihood-ratio, Neyman and
//! Wald statistics are then computed on the resulting `L x J` table.

pub mod error;
pub mod estimate;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod partition;
pub mod rng;
pub mod special;
pub mod stats;
pub mod tabulate;

pub use error::{Error, Result};
pub use estimate::{EstimatorKind, OptimizerConfig};
pub use model::{
    ConditionalModel, Covariates, Dataset, ExponentialRegressionModel, GaussianLinearModel, ParamVector,
};
pub use partition::{Balance, Cell, Origin, Partition};
pub use stats::{Df, DfConvention, DfPolicy, PValue, StatKind, TestReport, Warning};
pub use tabulate::{ContingencyTable, UGrid};
