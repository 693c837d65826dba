//! Parametric conditional models and the Rosenblatt transform.
//!
//! A [`ConditionalModel`] supplies the conditional CDF of the response
//! given the covariates, its log-density and the score. Transforming each
//! response through its fitted conditional CDF gives values that are
//! i.i.d. uniform on `[0, 1]` and independent of the covariates whenever
//! the model is correctly specified; every test in this crate is built on
//! that fact.

use std::f64::consts::PI;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use crate::special::std_normal_cdf;

/// Smallest admissible Gaussian scale.
pub const MIN_SCALE: f64 = 1e-12;

/// Covariate matrix, `n` rows by `k` columns, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    data: Vec<f64>,
    n: usize,
    k: usize,
}

impl Covariates {
    pub fn new(data: Vec<f64>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidData("covariate dimension k must be >= 1".into()));
        }
        if data.is_empty() || data.len() % k != 0 {
            return Err(Error::InvalidData(format!(
                "covariate buffer of length {} is not a non-empty multiple of k = {k}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite covariate at row {}, column {}",
                pos / k,
                pos % k
            )));
        }
        let n = data.len() / k;
        Ok(Self { data, n, k })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidData("covariate rows have unequal lengths".into()));
        }
        Self::new(rows.concat(), k)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub fn get(&self, i: usize, d: usize) -> f64 {
        self.data[i * self.k + d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.k)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Responses paired with their covariate rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    x: Covariates,
}

impl Dataset {
    pub fn new(y: Vec<f64>, x: Covariates) -> Result<Self> {
        if y.len() != x.n() {
            return Err(Error::InvalidData(format!(
                "{} responses but {} covariate rows",
                y.len(),
                x.n()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite response at row {i}")));
        }
        Ok(Self { y, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.x.k()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &Covariates {
        &self.x
    }

    pub fn observations(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.y.iter().copied().zip(self.x.rows())
    }
}

/// Model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn new(theta: Vec<f64>) -> Self {
        Self(theta)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// A parametric family for the conditional law of `Y` given `X`.
pub trait ConditionalModel: Send + Sync {
    fn name(&self) -> &'static str;

    /// Number of covariates `k` the model expects.
    fn covariate_dim(&self) -> usize;

    /// Parameter dimension `p`.
    fn param_dim(&self) -> usize;

    /// Checks length, finiteness and the family's parameter-space constraints.
    fn check_params(&self, theta: &[f64]) -> Result<()>;

    fn cdf(&self, y: f64, x: &[f64], theta: &[f64]) -> f64;

    fn log_density(&self, y: f64, x: &[f64], theta: &[f64]) -> f64;

    /// Gradient of `log_density` in `theta`, written into `out` (length `p`).
    fn score(&self, y: f64, x: &[f64], theta: &[f64], out: &mut [f64]);

    /// Indices of strictly positive parameters; optimizers move these on the
    /// log scale.
    fn positive_params(&self) -> Vec<usize> {
        Vec::new()
    }

    /// Starting point for numerical maximum likelihood.
    fn initial_guess(&self, data: &Dataset) -> ParamVector;

    /// Closed-form raw-data MLE, when the family has one.
    fn closed_form_mle(&self, _data: &Dataset) -> Option<Result<ParamVector>> {
        None
    }
}

fn check_len(model: &dyn ConditionalModel, theta: &[f64]) -> Result<()> {
    if theta.len() != model.param_dim() {
        return Err(Error::InvalidParameter(format!(
            "{} expects {} parameters, got {}",
            model.name(),
            model.param_dim(),
            theta.len()
        )));
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidParameter("non-finite parameter".into()));
    }
    Ok(())
}

#[inline]
fn linear_index(beta: &[f64], x: &[f64]) -> f64 {
    beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
}

/// `Y | X ~ Normal(beta_0 + beta' X, sigma^2)`, `theta = (beta_0, ..., beta_k, sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianLinearModel {
    k: usize,
}

impl GaussianLinearModel {
    pub fn new(k: usize) -> Self {
        Self { k }
    }
}

impl ConditionalModel for GaussianLinearModel {
    fn name(&self) -> &'static str {
        "gaussian_linear"
    }

    fn covariate_dim(&self) -> usize {
        self.k
    }

    fn param_dim(&self) -> usize {
        self.k + 2
    }

    fn check_params(&self, theta: &[f64]) -> Result<()> {
        check_len(self, theta)?;
        let sigma = theta[self.k + 1];
        if sigma < MIN_SCALE {
            return Err(Error::InvalidParameter(format!(
                "gaussian scale must be >= {MIN_SCALE:e}, got {sigma}"
            )));
        }
        Ok(())
    }

    fn cdf(&self, y: f64, x: &[f64], theta: &[f64]) -> f64 {
        let sigma = theta[self.k + 1];
        std_normal_cdf((y - linear_index(&theta[..=self.k], x)) / sigma)
    }

    fn log_density(&self, y: f64, x: &[f64], theta: &[f64]) -> f64 {
        let sigma = theta[self.k + 1];
        let z = (y - linear_index(&theta[..=self.k], x)) / sigma;
        -0.5 * (2.0 * PI).ln() - sigma.ln() - 0.5 * z * z
    }

    fn score(&self, y: f64, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let sigma = theta[self.k + 1];
        let z = (y - linear_index(&theta[..=self.k], x)) / sigma;
        out[0] = z / sigma;
        for (o, v) in out[1..=self.k].iter_mut().zip(x) {
            *o = z * v / sigma;
        }
        out[self.k + 1] = (z * z - 1.0) / sigma;
    }

    fn positive_params(&self) -> Vec<usize> {
        vec![self.k + 1]
    }

    fn initial_guess(&self, data: &Dataset) -> ParamVector {
        let n = data.n() as f64;
        let mean = data.y().iter().sum::<f64>() / n;
        let var = data.y().iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let mut theta = vec![0.0; self.k + 2];
        theta[0] = mean;
        theta[self.k + 1] = var.sqrt().max(1.0e-6);
        ParamVector(theta)
    }

    fn closed_form_mle(&self, data: &Dataset) -> Option<Result<ParamVector>> {
        Some(crate::estimate::mle_gaussian_linear(data))
    }
}

/// `Y | X ~ Exponential(rate = exp(beta_0 + beta' X))`, `theta = (beta_0, ..., beta_k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExponentialRegressionModel {
    k: usize,
}

impl ExponentialRegressionModel {
    pub fn new(k: usize) -> Self {
        Self { k }
    }

    fn rate(&self, x: &[f64], theta: &[f64]) -> f64 {
        linear_index(theta, x).exp()
    }
}

impl ConditionalModel for ExponentialRegressionModel {
    fn name(&self) -> &'static str {
        "exponential_regression"
    }

    fn covariate_dim(&self) -> usize {
        self.k
    }

    fn param_dim(&self) -> usize {
        self.k + 1
    }

    fn check_params(&self, theta: &[f64]) -> Result<()> {
        check_len(self, theta)
    }

    fn cdf(&self, y: f64, x: &[f64], theta: &[f64]) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        -(-self.rate(x, theta) * y).exp_m1()
    }

    fn log_density(&self, y: f64, x: &[f64], theta: &[f64]) -> f64 {
        if y < 0.0 {
            return f64::NEG_INFINITY;
        }
        let eta = linear_index(theta, x);
        eta - eta.exp() * y
    }

    fn score(&self, y: f64, x: &[f64], theta: &[f64], out: &mut [f64]) {
        if y < 0.0 {
            out.fill(f64::NAN);
            return;
        }
        let g = 1.0 - self.rate(x, theta) * y;
        out[0] = g;
        for (o, v) in out[1..].iter_mut().zip(x) {
            *o = g * v;
        }
    }

    fn initial_guess(&self, data: &Dataset) -> ParamVector {
        let mean = data.y().iter().sum::<f64>() / data.n() as f64;
        let mut theta = vec![0.0; self.k + 1];
        if mean > 0.0 {
            theta[0] = -mean.ln();
        }
        ParamVector(theta)
    }
}

fn check_model_data(model: &dyn ConditionalModel, data: &Dataset) -> Result<()> {
    if model.covariate_dim() != data.k() {
        return Err(Error::InvalidArgument(format!(
            "{} expects {} covariates, dataset has {}",
            model.name(),
            model.covariate_dim(),
            data.k()
        )));
    }
    Ok(())
}

/// Rosenblatt transform `V_i = F(y_i | x_i; theta)`, in input order.
pub fn rosenblatt(model: &dyn ConditionalModel, theta: &[f64], data: &Dataset) -> Result<Vec<f64>> {
    model.check_params(theta)?;
    check_model_data(model, data)?;
    data.observations()
        .enumerate()
        .map(|(i, (y, x))| {
            let v = model.cdf(y, x, theta);
            if v.is_finite() && (0.0..=1.0).contains(&v) {
                Ok(v)
            } else {
                Err(Error::ModelEvaluation(format!("cdf returned {v} at row {i}")))
            }
        })
        .collect()
}

/// Sum of log-densities; `-inf` when any density vanishes.
pub fn log_likelihood(model: &dyn ConditionalModel, theta: &[f64], data: &Dataset) -> Result<f64> {
    model.check_params(theta)?;
    check_model_data(model, data)?;
    let mut total = 0.0;
    for (y, x) in data.observations() {
        total += model.log_density(y, x, theta);
    }
    if total.is_nan() {
        return Err(Error::ModelEvaluation("log-likelihood is NaN".into()));
    }
    Ok(total)
}
