//! Parameter estimation: the raw-data MLE (closed form for the Gaussian
//! linear family, quasi-Newton ascent otherwise) and the grouped
//! minimum-chi-square estimator over parameter-dependent cells.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_likelihood, rosenblatt, ConditionalModel, Dataset, ParamVector, MIN_SCALE};
use crate::partition::Partition;
use crate::rng;
use crate::stats::pearson_stat;
use crate::tabulate::{cross_classify, UGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Parameters supplied by the user.
    Known,
    /// Maximum likelihood on the raw data.
    RawMle,
    /// Minimum chi-square on the cross-classified data.
    MinChisq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            tolerance: 1e-8,
            restarts: 4,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument("optimizer tolerance must be > 0".into()));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidArgument("optimizer restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Closed-form Gaussian linear MLE: least-squares `beta` and
/// `sigma = sqrt(RSS / n)`.
pub fn mle_gaussian_linear(data: &Dataset) -> Result<ParamVector> {
    let (n, k) = (data.n(), data.k());
    if n < k + 2 {
        return Err(Error::InsufficientData { required: k + 2, available: n });
    }
    let design = DMatrix::from_fn(n, k + 1, |i, c| if c == 0 { 1.0 } else { data.x().get(i, c - 1) });
    let y = DVector::from_column_slice(data.y());
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(Error::SingularDesign);
    }
    let beta = svd
        .solve(&y, 0.0)
        .map_err(|_| Error::SingularDesign)?;
    let resid = &y - &design * &beta;
    let sigma = (resid.norm_squared() / n as f64).sqrt();
    let beta: Vec<f64> = beta.iter().copied().collect();
    if !(sigma >= MIN_SCALE) {
        return Err(Error::DegenerateFit { beta });
    }
    let mut theta = beta;
    theta.push(sigma);
    Ok(ParamVector(theta))
}

/// Per-observation scores, `n x p`.
pub fn score_matrix(model: &dyn ConditionalModel, theta: &[f64], data: &Dataset) -> Result<DMatrix<f64>> {
    model.check_params(theta)?;
    let p = model.param_dim();
    let mut out = DMatrix::zeros(data.n(), p);
    let mut buf = vec![0.0; p];
    for (i, (y, x)) in data.observations().enumerate() {
        model.score(y, x, theta, &mut buf);
        if let Some(m) = buf.iter().position(|s| !s.is_finite()) {
            return Err(Error::ModelEvaluation(format!("non-finite score component {m} at row {i}")));
        }
        for (m, s) in buf.iter().enumerate() {
            out[(i, m)] = *s;
        }
    }
    Ok(out)
}

/// Outer-product information estimate `(1/n) sum s s'`.
pub fn fisher_information_estimate(model: &dyn ConditionalModel, data: &Dataset, theta: &[f64]) -> Result<DMatrix<f64>> {
    let s = score_matrix(model, theta, data)?;
    let info = s.transpose() * &s / data.n() as f64;
    // The product is symmetric up to rounding; make it exact.
    Ok((&info + info.transpose()) * 0.5)
}

/// Maps between model parameters and the unconstrained search space, where
/// positive parameters live on the log scale.
struct Reparam {
    positive: Vec<usize>,
}

impl Reparam {
    fn new(model: &dyn ConditionalModel) -> Self {
        Self { positive: model.positive_params() }
    }

    fn to_free(&self, theta: &[f64]) -> Vec<f64> {
        let mut eta = theta.to_vec();
        for &i in &self.positive {
            eta[i] = theta[i].ln();
        }
        eta
    }

    fn to_theta(&self, eta: &[f64]) -> Vec<f64> {
        let mut theta = eta.to_vec();
        for &i in &self.positive {
            theta[i] = eta[i].exp();
        }
        theta
    }
}

/// Mean log-likelihood, or `-inf` where it is undefined.
fn mean_loglik(model: &dyn ConditionalModel, theta: &[f64], data: &Dataset) -> f64 {
    match log_likelihood(model, theta, data) {
        Ok(v) if !v.is_nan() => v / data.n() as f64,
        _ => f64::NEG_INFINITY,
    }
}

/// Per-observation log densities, or `None` where any is undefined.
fn log_densities(model: &dyn ConditionalModel, theta: &[f64], data: &Dataset) -> Option<Vec<f64>> {
    model.check_params(theta).ok()?;
    let ll: Vec<f64> = data.observations().map(|(y, x)| model.log_density(y, x, theta)).collect();
    ll.iter().all(|v| v.is_finite()).then_some(ll)
}

/// Result of [`mle_numeric_traced`].
#[derive(Debug, Clone, PartialEq)]
pub struct MleTrace {
    pub theta: ParamVector,
    /// Mean log-likelihood at every accepted iterate, starting with `init`.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// Quasi-Newton ascent on the mean log-likelihood.
///
/// Directions use the outer-product (BHHH) curvature estimate and a
/// backtracking line search accepts only non-decreasing objective values.
/// Stops once the sup-norm of the mean score is within `cfg.tolerance`.
pub fn mle_numeric_traced(model: &dyn ConditionalModel, data: &Dataset, init: &ParamVector, cfg: &OptimizerConfig) -> Result<MleTrace> {
    cfg.validate()?;
    model.check_params(init).map_err(|_| Error::InvalidStart)?;
    let reparam = Reparam::new(model);
    let n = data.n() as f64;
    let mut theta = init.to_vec();
    let mut f = mean_loglik(model, &theta, data);
    let Some(mut current) = log_densities(model, &theta, data).filter(|_| f.is_finite()) else {
        return Err(Error::InvalidStart);
    };
    let mut trace = vec![f];
    let mut grad_norm = f64::INFINITY;

    for iter in 0..cfg.max_iterations {
        let scores = match score_matrix(model, &theta, data) {
            Ok(s) => s,
            Err(_) => break,
        };
        let grad_theta = scores.row_sum().transpose() / n;
        grad_norm = grad_theta.amax();
        if grad_norm <= cfg.tolerance {
            return Ok(MleTrace { theta: ParamVector(theta), objective: trace, iterations: iter });
        }

        let mut free_scores = scores;
        for &i in &reparam.positive {
            let scale = theta[i];
            free_scores.column_mut(i).scale_mut(scale);
        }
        let grad = free_scores.row_sum().transpose() / n;
        let bhhh = free_scores.transpose() * &free_scores / n;
        let direction = bhhh
            .cholesky()
            .map(|c| c.solve(&grad))
            .filter(|d| d.iter().all(|v| v.is_finite()) && d.dot(&grad) > 0.0)
            .unwrap_or_else(|| grad.clone());
        let slope = grad.dot(&direction);

        // Objective changes are summed observation by observation: near the
        // optimum they are far smaller than the rounding error of the total.
        let eta = reparam.to_free(&theta);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial_eta: Vec<f64> = eta.iter().zip(direction.iter()).map(|(e, d)| e + step * d).collect();
            let trial = reparam.to_theta(&trial_eta);
            if let Some(ll) = log_densities(model, &trial, data) {
                let gain = ll.iter().zip(&current).map(|(a, b)| a - b).sum::<f64>() / n;
                if gain >= 1e-4 * step * slope || (step < 1e-3 && gain >= 0.0) {
                    accepted = Some((trial, ll, gain));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((t, ll, gain)) => {
                theta = t;
                current = ll;
                f += gain;
                trace.push(f);
            }
            None => break,
        }
    }

    // A final check catches convergence on the last accepted step.
    if let Ok(scores) = score_matrix(model, &theta, data) {
        let g = (scores.row_sum().transpose() / n).amax();
        if cfg.max_iterations > 0 && g <= cfg.tolerance {
            return Ok(MleTrace { theta: ParamVector(theta), objective: trace, iterations: cfg.max_iterations });
        }
        grad_norm = g;
    }
    Err(Error::ConvergenceFailure {
        last: ParamVector(theta),
        iterations: cfg.max_iterations,
        gradient_norm: grad_norm,
    })
}

/// Raw-data MLE by numerical ascent from `init`.
pub fn mle_numeric(model: &dyn ConditionalModel, data: &Dataset, init: &ParamVector, cfg: &OptimizerConfig) -> Result<ParamVector> {
    mle_numeric_traced(model, data, init, cfg).map(|t| t.theta)
}

/// Raw-data MLE: closed form where the family has one, numerical otherwise.
pub fn raw_mle(model: &dyn ConditionalModel, data: &Dataset, cfg: &OptimizerConfig) -> Result<ParamVector> {
    match model.closed_form_mle(data) {
        Some(r) => r,
        None => mle_numeric(model, data, &model.initial_guess(data), cfg),
    }
}

/// Pearson statistic of the cross-classification at `theta`.
pub fn min_chisq_objective(model: &dyn ConditionalModel, theta: &[f64], data: &Dataset, grid: &UGrid, partition: &Partition) -> Result<f64> {
    let v = rosenblatt(model, theta, data)?;
    let table = cross_classify(&v, data.x(), grid, partition)?;
    pearson_stat(&table)
}

/// Grouped minimum-chi-square estimator.
///
/// The objective is piecewise constant in `theta`, so the search is a
/// Nelder-Mead simplex in the unconstrained parametrization, run
/// `cfg.restarts` times: first from `init`, then from seeded Gaussian
/// perturbations of the best point so far. The returned point is never
/// worse than `init`; ties keep the earlier restart.
pub fn min_chisq_estimate(
    model: &dyn ConditionalModel,
    data: &Dataset,
    grid: &UGrid,
    partition: &Partition,
    init: &ParamVector,
    cfg: &OptimizerConfig,
) -> Result<ParamVector> {
    cfg.validate()?;
    let reparam = Reparam::new(model);
    let objective = |eta: &[f64]| -> f64 {
        let theta = reparam.to_theta(eta);
        min_chisq_objective(model, &theta, data, grid, partition).unwrap_or(f64::INFINITY)
    };
    model.check_params(init).map_err(|_| Error::InvalidStart)?;
    let eta0 = reparam.to_free(init);
    let f0 = objective(&eta0);
    if !f0.is_finite() {
        return Err(Error::InvalidStart);
    }
    let steps = initial_steps(model, data, init, &reparam);

    let mut best = (eta0.clone(), f0);
    for restart in 0..cfg.restarts {
        let start = if restart == 0 {
            eta0.clone()
        } else {
            let mut rng = rng::substream(cfg.seed, restart as u64);
            best.0
                .iter()
                .zip(&steps)
                .map(|(e, s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    e + s * z
                })
                .collect()
        };
        let (eta, f) = nelder_mead(&objective, &start, &steps, cfg.max_iterations);
        if f < best.1 {
            best = (eta, f);
        }
    }
    Ok(ParamVector(reparam.to_theta(&best.0)))
}

/// Two standard errors per free coordinate, from the outer-product
/// information at `init`; falls back to `0.1 max(1, |eta|)`.
fn initial_steps(model: &dyn ConditionalModel, data: &Dataset, init: &[f64], reparam: &Reparam) -> Vec<f64> {
    let eta = reparam.to_free(init);
    let fallback: Vec<f64> = eta.iter().map(|e| 0.1 * e.abs().max(1.0)).collect();
    let Ok(mut scores) = score_matrix(model, init, data) else {
        return fallback;
    };
    for &i in &reparam.positive {
        let scale = init[i];
        scores.column_mut(i).scale_mut(scale);
    }
    let n = data.n() as f64;
    let info = scores.transpose() * &scores / n;
    match info.try_inverse() {
        Some(inv) => (0..eta.len())
            .map(|i| {
                let se = (inv[(i, i)] / n).sqrt();
                if se.is_finite() && se > 0.0 { 2.0 * se } else { fallback[i] }
            })
            .collect(),
        None => fallback,
    }
}

/// Plain Nelder-Mead minimisation (reflection 1, expansion 2, contraction
/// and shrink 1/2).
fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, start: &[f64], steps: &[f64], max_iterations: usize) -> (Vec<f64>, f64) {
    let dim = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((start.to_vec(), f(start)));
    for i in 0..dim {
        let mut v = start.to_vec();
        v[i] += steps[i];
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let order = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));

    for _ in 0..max_iterations {
        order(&mut simplex);
        let diameter = simplex[1..]
            .iter()
            .flat_map(|(v, _)| v.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if diameter < 1e-9 {
            break;
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|d| simplex[..dim].iter().map(|(v, _)| v[d]).sum::<f64>() / dim as f64)
            .collect();
        let worst = simplex[dim].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect()
        };
        let reflected = along(1.0);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = along(2.0);
            let fe = f(&expanded);
            simplex[dim] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflected, fr);
        } else {
            let contracted = if fr < worst.1 { along(0.5) } else { along(-0.5) };
            let fc = f(&contracted);
            if fc < worst.1.min(fr) {
                simplex[dim] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let v: Vec<f64> = best.iter().zip(&entry.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
                    let fv = f(&v);
                    *entry = (v, fv);
                }
            }
        }
    }
    order(&mut simplex);
    simplex.swap_remove(0)
}
