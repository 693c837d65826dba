//! Seeded Monte Carlo experiments: size, power, degrees-of-freedom
//! calibration and fixed-versus-random partition comparisons.
//!
//! Replication `i` draws everything it needs from substream `i` of the
//! master seed, so results do not depend on scheduling. Replications run on
//! the rayon pool and are reduced in index order.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{min_chisq_estimate, raw_mle, EstimatorKind, OptimizerConfig};
use crate::model::{rosenblatt, ConditionalModel, Covariates, Dataset, ExponentialRegressionModel, GaussianLinearModel, ParamVector};
use crate::partition::{gessaman_partition, rtp_partition_with, Partition, RtpOptions};
use crate::rng::{substream, StreamRng};
use crate::stats::{run_test, DfConvention, DfPolicy, EstimatorContext, RawMleContext, StatKind, TestReport};
use crate::tabulate::{cross_classify, UGrid};

/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `y = beta'(1, x) + sigma e`.
    GaussianLinear,
    /// `y = beta'(1, x) + sigma (1 + |x_1|) e`.
    GaussianHeteroskedastic,
    /// `y ~ Exponential(rate = exp(beta'(1, x)))`.
    ExponentialRegression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLaw {
    /// Independent `Uniform(-1, 1)` coordinates.
    #[default]
    Uniform,
    /// Independent standard normal coordinates.
    Normal,
}

/// Data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub family: Family,
    pub true_params: ParamVector,
    pub k: usize,
    #[serde(default)]
    pub covariates: CovariateLaw,
    pub n: usize,
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.n < 1 {
            return Err(Error::InvalidArgument("dgp needs k >= 1 and n >= 1".into()));
        }
        let p = match self.family {
            Family::GaussianLinear | Family::GaussianHeteroskedastic => self.k + 2,
            Family::ExponentialRegression => self.k + 1,
        };
        if self.true_params.len() != p {
            return Err(Error::InvalidArgument(format!(
                "dgp true_params has length {}, expected {p}",
                self.true_params.len()
            )));
        }
        if self.true_params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("dgp true_params must be finite".into()));
        }
        if matches!(self.family, Family::GaussianLinear | Family::GaussianHeteroskedastic) && self.true_params[p - 1] < 0.0 {
            return Err(Error::InvalidArgument("dgp scale must be >= 0".into()));
        }
        Ok(())
    }

    /// Draws one dataset. A zero scale is allowed and gives noiseless data.
    pub fn simulate(&self, rng: &mut StreamRng) -> Result<Dataset> {
        let (n, k) = (self.n, self.k);
        let mut x = Vec::with_capacity(n * k);
        let uniform = Uniform::new_inclusive(-1.0, 1.0).expect("valid bounds");
        for _ in 0..n * k {
            x.push(match self.covariates {
                CovariateLaw::Uniform => uniform.sample(rng),
                CovariateLaw::Normal => StandardNormal.sample(rng),
            });
        }
        let theta = &self.true_params;
        let index = |row: &[f64]| theta[0] + row.iter().zip(&theta[1..=k]).map(|(a, b)| a * b).sum::<f64>();
        let mut y = Vec::with_capacity(n);
        for row in x.chunks_exact(k) {
            let mean = index(row);
            y.push(match self.family {
                Family::GaussianLinear => {
                    let e: f64 = StandardNormal.sample(rng);
                    mean + theta[k + 1] * e
                }
                Family::GaussianHeteroskedastic => {
                    let e: f64 = StandardNormal.sample(rng);
                    mean + theta[k + 1] * (1.0 + row[0].abs()) * e
                }
                Family::ExponentialRegression => {
                    let rate = mean.exp();
                    let e: f64 = Exp::new(1.0).expect("unit rate").sample(rng);
                    e / rate
                }
            });
        }
        Dataset::new(y, Covariates::new(x, k)?)
    }
}

/// Model under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    GaussianLinear,
    ExponentialRegression,
}

impl ModelId {
    pub fn build(self, k: usize) -> Box<dyn ConditionalModel> {
        match self {
            ModelId::GaussianLinear => Box::new(GaussianLinearModel::new(k)),
            ModelId::ExponentialRegression => Box::new(ExponentialRegressionModel::new(k)),
        }
    }
}

/// How the covariate partition is built in each replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionRule {
    /// Fixed product grid; `cuts[d]` lists the interior cut points on axis `d`.
    Grid { cuts: Vec<Vec<f64>> },
    Gessaman {
        #[serde(rename = "T")]
        t: usize,
    },
    Rtp {
        #[serde(rename = "T")]
        t: usize,
        r: usize,
        #[serde(default)]
        equal_depth: bool,
    },
}

impl PartitionRule {
    /// Builds the partition for `x`; `seed` is used by the random tree only.
    pub fn build(&self, x: &Covariates, seed: u64) -> Result<Partition> {
        let partition = match self {
            PartitionRule::Grid { cuts } => Partition::grid(cuts)?,
            PartitionRule::Gessaman { t } => gessaman_partition(x, *t)?,
            PartitionRule::Rtp { t, r, equal_depth } => {
                rtp_partition_with(x, &RtpOptions { t: *t, r: *r, seed, equal_depth: *equal_depth })?.partition
            }
        };
        if partition.len() > x.n() {
            return Err(Error::InsufficientData { required: partition.len(), available: x.n() });
        }
        Ok(partition)
    }

    /// Number of cells the rule produces in dimension `k`.
    pub fn cell_count(&self, k: usize) -> usize {
        match self {
            PartitionRule::Grid { cuts } => cuts.iter().map(|c| c.len() + 1).product(),
            PartitionRule::Gessaman { t } => t.pow(k as u32),
            PartitionRule::Rtp { t, r, equal_depth } => {
                crate::partition::rtp_cell_count(k, &RtpOptions { t: *t, r: *r, seed: 0, equal_depth: *equal_depth })
            }
        }
    }
}

fn default_levels() -> Vec<f64> {
    vec![0.01, 0.05, 0.10]
}

/// One experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dgp: DgpSpec,
    pub model: ModelId,
    pub estimator: EstimatorKind,
    /// Parameter value for the `known` estimator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<ParamVector>,
    #[serde(rename = "L")]
    pub l: usize,
    pub partition: PartitionRule,
    pub stats: Vec<StatKind>,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    pub replications: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub df_convention: DfConvention,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.optimizer.validate()?;
        if self.replications < 1 {
            return Err(Error::InvalidArgument("replications must be >= 1".into()));
        }
        if self.l < 1 {
            return Err(Error::InvalidArgument("L must be >= 1".into()));
        }
        if self.stats.is_empty() {
            return Err(Error::InvalidArgument("at least one statistic is required".into()));
        }
        if let Some(bad) = self.levels.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::InvalidArgument(format!("level {bad} is not in (0, 1)")));
        }
        let model = self.model.build(self.dgp.k);
        match (self.estimator, &self.theta) {
            (EstimatorKind::Known, None) => {
                return Err(Error::InvalidArgument("estimator known requires theta".into()))
            }
            (EstimatorKind::Known, Some(theta)) if theta.len() != model.param_dim() => {
                return Err(Error::InvalidArgument(format!(
                    "theta has length {}, model expects {}",
                    theta.len(),
                    model.param_dim()
                )))
            }
            _ => {}
        }
        Ok(())
    }

    /// Parameters subtracted from the base degrees of freedom.
    pub fn p_adjust(&self) -> usize {
        match self.estimator {
            EstimatorKind::Known => 0,
            _ => self.model.build(self.dgp.k).param_dim(),
        }
    }

    pub fn df_policy(&self) -> DfPolicy {
        DfPolicy { convention: self.df_convention, p_adjust: self.p_adjust() }
    }
}

/// Everything computed in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub rep_index: usize,
    pub theta: ParamVector,
    pub reports: Vec<TestReport>,
}

/// Runs replication `rep_index`; a pure function of `(cfg, rep_index)`.
pub fn run_replication(cfg: &SimConfig, rep_index: usize) -> Result<Replication> {
    let mut rng = substream(cfg.master_seed, rep_index as u64);
    let data = cfg.dgp.simulate(&mut rng)?;
    let partition_seed: u64 = rng.random();
    let optimizer_seed: u64 = rng.random();
    let partition = cfg.partition.build(data.x(), partition_seed)?;
    let grid = UGrid::balanced(cfg.l)?;
    let model = cfg.model.build(cfg.dgp.k);
    let opt = OptimizerConfig { seed: optimizer_seed, ..cfg.optimizer };

    let theta = match cfg.estimator {
        EstimatorKind::Known => cfg
            .theta
            .clone()
            .ok_or_else(|| Error::InvalidArgument("estimator known requires theta".into()))?,
        EstimatorKind::RawMle => raw_mle(model.as_ref(), &data, &opt)?,
        EstimatorKind::MinChisq => {
            let init = raw_mle(model.as_ref(), &data, &opt)?;
            min_chisq_estimate(model.as_ref(), &data, &grid, &partition, &init, &opt)?
        }
    };
    let v = rosenblatt(model.as_ref(), &theta, &data)?;
    let table = cross_classify(&v, data.x(), &grid, &partition)?;
    let ctx = match cfg.estimator {
        EstimatorKind::Known => EstimatorContext::known(),
        EstimatorKind::MinChisq => EstimatorContext::min_chisq(),
        EstimatorKind::RawMle => EstimatorContext::raw_mle(RawMleContext {
            model: model.as_ref(),
            theta: &theta,
            data: &data,
            grid: &grid,
            partition: &partition,
        }),
    };
    let policy = cfg.df_policy();
    let reports = cfg
        .stats
        .iter()
        .map(|&kind| run_test(kind, &table, policy, &ctx))
        .collect::<Result<Vec<_>>>()?;
    Ok(Replication { rep_index, theta, reports })
}

/// Runs every replication in parallel; output is in index order.
pub fn run_replications(cfg: &SimConfig) -> Result<Vec<Result<Replication>>> {
    cfg.validate()?;
    Ok((0..cfg.replications)
        .into_par_iter()
        .map(|i| run_replication(cfg, i))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub rep_index: usize,
    pub reason: String,
    pub message: String,
}

/// Rejection summary for one `(statistic, level)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub kind: StatKind,
    pub level: f64,
    /// Rejections by the conservative rule `p_hi < level`.
    pub rejections: usize,
    pub rate: f64,
    pub mc_se: f64,
    /// Rejections by `p_lo < level`; equal to `rejections` for point p-values.
    pub liberal_rejections: usize,
    pub liberal_rate: f64,
    pub mean_stat: f64,
    /// Kolmogorov-Smirnov distance of the p-values from uniform; point
    /// p-values only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ks_uniform: Option<f64>,
}

/// Moments of one statistic over successful replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    pub kind: StatKind,
    pub mean: f64,
    pub variance: f64,
    /// Standard error of `mean`.
    pub se: f64,
    /// Mean of the reported degrees of freedom (upper end for brackets).
    pub mean_df: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ks_uniform: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub completed: usize,
    pub per_stat: Vec<RateRow>,
    pub summaries: Vec<StatSummary>,
    pub failures: Vec<Failure>,
}

/// Aggregates replication outcomes. Input order is irrelevant: outcomes
/// are keyed by replication index and reduced in index order.
pub fn summarize(cfg: &SimConfig, mut outcomes: Vec<(usize, Result<Replication>)>) -> Result<SimResult> {
    outcomes.sort_by_key(|(i, _)| *i);
    let total = outcomes.len();
    let mut done = Vec::new();
    let mut failures = Vec::new();
    for (i, outcome) in outcomes {
        match outcome {
            Ok(rep) => done.push(rep),
            Err(e) => failures.push(Failure { rep_index: i, reason: e.reason_code().to_string(), message: e.to_string() }),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_SHARE * total as f64 {
        return Err(Error::ExperimentInvalid { failed: failures.len(), total });
    }
    let m = done.len();
    let mut per_stat = Vec::new();
    let mut summaries = Vec::new();
    for (s, &kind) in cfg.stats.iter().enumerate() {
        let reports: Vec<&TestReport> = done.iter().map(|r| &r.reports[s]).collect();
        let values: Vec<f64> = reports.iter().map(|r| r.value).collect();
        let (mean, variance) = mean_variance(&values);
        let point_p: Option<Vec<f64>> = reports
            .iter()
            .map(|r| match r.p_value {
                crate::stats::PValue::Point(p) => Some(p),
                _ => None,
            })
            .collect();
        let ks_uniform = point_p.filter(|p| !p.is_empty()).map(|p| ks_uniform_distance(&p));
        let mean_df = if m == 0 {
            f64::NAN
        } else {
            reports
                .iter()
                .map(|r| match r.df {
                    crate::stats::Df::Point(d) => d as f64,
                    crate::stats::Df::Interval(_, hi) => hi as f64,
                })
                .sum::<f64>()
                / m as f64
        };
        summaries.push(StatSummary {
            kind,
            mean,
            variance,
            se: (variance / m as f64).sqrt(),
            mean_df,
            ks_uniform,
        });
        for &level in &cfg.levels {
            let rejections = reports.iter().filter(|r| r.p_value.hi() < level).count();
            let liberal = reports.iter().filter(|r| r.p_value.lo() < level).count();
            let rate = rejections as f64 / m as f64;
            per_stat.push(RateRow {
                kind,
                level,
                rejections,
                rate,
                mc_se: (rate * (1.0 - rate) / m as f64).sqrt(),
                liberal_rejections: liberal,
                liberal_rate: liberal as f64 / m as f64,
                mean_stat: mean,
                ks_uniform,
            });
        }
    }
    Ok(SimResult { config: cfg.clone(), completed: m, per_stat, summaries, failures })
}

/// Runs and aggregates a full experiment.
pub fn run_experiment(cfg: &SimConfig) -> Result<SimResult> {
    let outcomes = run_replications(cfg)?;
    summarize(cfg, outcomes.into_iter().enumerate().collect())
}

impl SimResult {
    pub fn row(&self, kind: StatKind, level: f64) -> Option<&RateRow> {
        self.per_stat.iter().find(|r| r.kind == kind && r.level == level)
    }

    pub fn summary(&self, kind: StatKind) -> Option<&StatSummary> {
        self.summaries.iter().find(|s| s.kind == kind)
    }
}

/// Monte Carlo mean of a statistic set against the degrees of freedom
/// implied by each counting convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfCalibration {
    pub kind: StatKind,
    pub mean: f64,
    pub se: f64,
    /// `J (L - 1) - p_adjust`.
    pub conditional_df: f64,
    /// `J L - 1 - p_adjust`.
    pub unconditional_df: f64,
    /// Mean reported degrees of freedom (the effective rank for the raw-MLE Wald form).
    pub reported_df: f64,
    pub z_conditional: f64,
    pub z_unconditional: f64,
}

/// Estimates degrees of freedom by the mean of each statistic.
pub fn calibrate_df(cfg: &SimConfig) -> Result<Vec<DfCalibration>> {
    let result = run_experiment(cfg)?;
    let j = cfg.partition.cell_count(cfg.dgp.k) as f64;
    let l = cfg.l as f64;
    let p = cfg.p_adjust() as f64;
    let (cond, uncond) = if cfg.l == 1 { (0.0, 0.0) } else { (j * (l - 1.0) - p, j * l - 1.0 - p) };
    Ok(result
        .summaries
        .iter()
        .map(|s| {
            let z = |df: f64| if s.se > 0.0 { (s.mean - df) / s.se } else if s.mean == df { 0.0 } else { f64::INFINITY };
            DfCalibration {
                kind: s.kind,
                mean: s.mean,
                se: s.se,
                conditional_df: cond,
                unconditional_df: uncond,
                reported_df: s.mean_df,
                z_conditional: z(cond),
                z_unconditional: z(uncond),
            }
        })
        .collect())
}

fn mean_variance(values: &[f64]) -> (f64, f64) {
    let m = values.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    if m == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (m - 1) as f64)
}

/// `sup_t |F_m(t) - t|` for a sample on `[0, 1]`.
pub fn ks_uniform_distance(sample: &[f64]) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &u)| {
            let above = (i + 1) as f64 / m - u;
            let below = u - i as f64 / m;
            above.max(below)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov tail `P(K > lambda) = 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Approximate p-value of a one-sample KS distance `d` from `m` draws,
/// using Stephens' finite-sample scaling.
pub fn ks_p_value(d: f64, m: usize) -> f64 {
    let root = (m as f64).sqrt();
    kolmogorov_sf((root + 0.12 + 0.11 / root) * d)
}
