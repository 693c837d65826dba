//! The trinity of chi-square statistics on an `L x J` table, the Wald form
//! at the raw-data MLE, degrees-of-freedom conventions and p-values.
//!
//! Under the null every column `j` of the table is multinomial with
//! `N_j` trials and cell probabilities `|U_l|`, so expected counts are
//! `E_lj = N_j |U_l|`. The Pearson, score (LM) and null-covariance Wald
//! statistics all coincide on such tables; they are computed here along
//! separate algebraic routes so that the identity can be checked.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{fisher_information_estimate, score_matrix, EstimatorKind};
use crate::linalg::{quad_form, sym_pinv};
use crate::model::{rosenblatt, ConditionalModel, Dataset};
use crate::partition::Partition;
use crate::special::chisq_sf;
use crate::tabulate::{classify, tabulate, Classification, ContingencyTable, UGrid};

/// Relative eigenvalue cutoff for pseudoinverses and effective ranks.
pub const RANK_TOL: f64 = 1e-10;

/// Most negative eigenvalue tolerated in the adjusted Wald covariance.
pub const NEGATIVE_EIGEN_TOL: f64 = -1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    Pearson,
    /// Lagrange multiplier (score) statistic; equal to Pearson.
    Lm,
    /// Likelihood ratio, `G^2`.
    Lr,
    /// Neyman's modified chi-square.
    Neyman,
    /// Wald quadratic form with the null multinomial covariance.
    WaldNull,
    /// Wald quadratic form with the covariance adjusted for raw-data MLE.
    WaldRawMle,
}

impl StatKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StatKind::Pearson => "pearson",
            StatKind::Lm => "lm",
            StatKind::Lr => "lr",
            StatKind::Neyman => "neyman",
            StatKind::WaldNull => "wald_null",
            StatKind::WaldRawMle => "wald_raw_mle",
        }
    }
}

impl fmt::Display for StatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StatKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pearson" => StatKind::Pearson,
            "lm" => StatKind::Lm,
            "lr" => StatKind::Lr,
            "neyman" => StatKind::Neyman,
            "wald_null" => StatKind::WaldNull,
            "wald_raw_mle" => StatKind::WaldRawMle,
            other => return Err(Error::InvalidArgument(format!("unknown statistic {other:?}"))),
        })
    }
}

/// How the base degrees of freedom are counted before subtracting `p_adjust`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfConvention {
    /// `J (L - 1)`: column totals are conditioned on.
    #[default]
    Conditional,
    /// `J L - 1`.
    Unconditional,
}

impl DfConvention {
    pub fn base_df(self, l: usize, j: usize) -> i64 {
        match self {
            DfConvention::Conditional => (j * (l - 1)) as i64,
            DfConvention::Unconditional => (j * l) as i64 - 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DfPolicy {
    pub convention: DfConvention,
    pub p_adjust: usize,
}

impl DfPolicy {
    pub fn conditional(p_adjust: usize) -> Self {
        Self { convention: DfConvention::Conditional, p_adjust }
    }

    pub fn unconditional(p_adjust: usize) -> Self {
        Self { convention: DfConvention::Unconditional, p_adjust }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Df {
    Point(u32),
    /// Chernoff-Lehmann bracket `[lo, hi]`.
    Interval(u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PValue {
    Point(f64),
    Interval { lo: f64, hi: f64 },
}

impl PValue {
    /// Upper end of the bracket (the point value for point p-values).
    pub fn hi(self) -> f64 {
        match self {
            PValue::Point(p) => p,
            PValue::Interval { hi, .. } => hi,
        }
    }

    pub fn lo(self) -> f64 {
        match self {
            PValue::Point(p) => p,
            PValue::Interval { lo, .. } => lo,
        }
    }

    /// Conservative decision: reject only if even the largest p is below `level`.
    pub fn rejects(self, level: f64) -> bool {
        self.hi() < level
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warning {
    /// Some `O_lj = 0`; the `G^2` chi-square approximation is unreliable.
    ZeroObservedCell,
    /// `L = 1`: every statistic is identically zero.
    DegenerateGrid,
    /// The pseudoinverted covariance lost rank beyond the structural deficiency.
    RankDeficiency { expected: usize, found: usize },
}

/// Outcome of one test.
#[derive(Debug, Clone, PartialEq)]
pub struct TestReport {
    pub kind: StatKind,
    pub value: f64,
    pub df: Df,
    pub p_value: PValue,
    pub estimator: EstimatorKind,
    pub warnings: Vec<Warning>,
}

/// Serialized report entry: `df` or `df_interval`, `p` or `p_interval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReportDoc {
    pub kind: StatKind,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df_interval: Option<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_interval: Option<[f64; 2]>,
    pub estimator: EstimatorKind,
    pub warnings: Vec<Warning>,
}

impl TestReport {
    pub fn to_doc(&self) -> TestReportDoc {
        let (df, df_interval) = match self.df {
            Df::Point(d) => (Some(d), None),
            Df::Interval(lo, hi) => (None, Some([lo, hi])),
        };
        let (p, p_interval) = match self.p_value {
            PValue::Point(p) => (Some(p), None),
            PValue::Interval { lo, hi } => (None, Some([lo, hi])),
        };
        TestReportDoc {
            kind: self.kind,
            value: self.value,
            df,
            df_interval,
            p,
            p_interval,
            estimator: self.estimator,
            warnings: self.warnings.clone(),
        }
    }
}

fn require_nonempty_columns(table: &ContingencyTable) -> Result<()> {
    match table.column_counts().iter().position(|&c| c == 0) {
        Some(j) => Err(Error::EmptyCell(format!("covariate cell {j} contains no observations"))),
        None => Ok(()),
    }
}

fn cells(table: &ContingencyTable) -> impl Iterator<Item = (f64, f64)> + '_ {
    (0..table.rows()).flat_map(move |l| {
        (0..table.cols()).map(move |j| (table.observed(l, j) as f64, table.expected(l, j)))
    })
}

/// `X^2 = sum (O - E)^2 / E`.
pub fn pearson_stat(table: &ContingencyTable) -> Result<f64> {
    require_nonempty_columns(table)?;
    Ok(cells(table).map(|(o, e)| (o - e) * (o - e) / e).sum())
}

/// Score statistic for `H0: P(V in U_l | X in A_j) = |U_l|`, column by
/// column: `s' I^{-1} s` with the multinomial score `s` and information `I`
/// over the first `L - 1` bins.
pub fn lm_stat(table: &ContingencyTable) -> Result<f64> {
    require_nonempty_columns(table)?;
    let l = table.rows();
    let w = table.widths();
    let mut total = 0.0;
    for j in 0..table.cols() {
        let n_j = table.column_counts()[j] as f64;
        let last = table.observed(l - 1, j) as f64 / w[l - 1];
        // s_l = O_l / w_l - O_L / w_L and I^{-1} = (diag(w) - w w') / N_j.
        let (mut sw2, mut sw) = (0.0, 0.0);
        for (b, &wb) in w.iter().enumerate().take(l - 1) {
            let s = table.observed(b, j) as f64 / wb - last;
            sw2 += wb * s * s;
            sw += wb * s;
        }
        total += (sw2 - sw * sw) / n_j;
    }
    Ok(total.max(0.0))
}

/// `G^2 = 2 sum O log(O / E)` with `0 log 0 = 0`.
pub fn lr_stat(table: &ContingencyTable) -> Result<f64> {
    require_nonempty_columns(table)?;
    let g2: f64 = cells(table)
        .filter(|&(o, _)| o > 0.0)
        .map(|(o, e)| o * (o / e).ln())
        .sum();
    Ok((2.0 * g2).max(0.0))
}

/// `sum (O - E)^2 / O`; every observed count must be positive.
pub fn neyman_stat(table: &ContingencyTable) -> Result<f64> {
    require_nonempty_columns(table)?;
    if table.counts().contains(&0) {
        return Err(Error::EmptyCell("Neyman's statistic needs every O_lj > 0".into()));
    }
    Ok(cells(table).map(|(o, e)| (o - e) * (o - e) / o).sum())
}

/// True when some observed count is zero.
pub fn has_zero_cell(table: &ContingencyTable) -> bool {
    table.counts().contains(&0)
}

/// Value and rank of a Wald quadratic form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldFit {
    pub value: f64,
    /// Numerical rank of the covariance that was pseudoinverted.
    pub effective_df: usize,
    pub min_eigenvalue: f64,
}

// Vector layout shared by the Wald forms: column blocks, index j * L + l.
fn discrepancy(table: &ContingencyTable) -> DVector<f64> {
    let (l, j) = (table.rows(), table.cols());
    let n = table.n() as f64;
    let w = table.widths();
    let q = table.q_hat();
    DVector::from_fn(l * j, |idx, _| {
        let (jj, ll) = (idx / l, idx % l);
        table.observed(ll, jj) as f64 / n - w[ll] * q[jj]
    })
}

/// `W = n d' Sigma0^+ d` with `d = vec(O/n) - p0`, `p0_lj = |U_l| q_j` and
/// `Sigma0 = diag(p0) - p0 p0'`.
pub fn wald_null_quadform(table: &ContingencyTable) -> Result<WaldFit> {
    require_nonempty_columns(table)?;
    let (l, j) = (table.rows(), table.cols());
    let w = table.widths();
    let q = table.q_hat();
    let p0 = DVector::from_fn(l * j, |idx, _| w[idx % l] * q[idx / l]);
    let sigma = DMatrix::from_diagonal(&p0) - &p0 * p0.transpose();
    let sp = sym_pinv(&sigma, RANK_TOL);
    let d = discrepancy(table);
    Ok(WaldFit {
        value: (table.n() as f64 * quad_form(&sp.pinv, &d)).max(0.0),
        effective_df: sp.rank,
        min_eigenvalue: sp.eigenvalues[0],
    })
}

/// Wald form with covariance `Sigma - C I^{-1} C'`, where `Sigma` is the
/// within-column multinomial covariance `blockdiag_j q_j (diag(w) - w w')`,
/// `C` (`JL x p`) the covariance of the centred cell indicators with the
/// score and `I` (`p x p`) the information. With `p = 0` this is the null
/// form.
pub fn wald_adjusted(table: &ContingencyTable, cross: &DMatrix<f64>, info: &DMatrix<f64>) -> Result<WaldFit> {
    require_nonempty_columns(table)?;
    let (l, j) = (table.rows(), table.cols());
    let dim = l * j;
    let w = table.widths();
    let q = table.q_hat();
    let mut sigma = DMatrix::zeros(dim, dim);
    for jj in 0..j {
        for a in 0..l {
            for b in 0..l {
                let delta = if a == b { w[a] } else { 0.0 };
                sigma[(jj * l + a, jj * l + b)] = q[jj] * (delta - w[a] * w[b]);
            }
        }
    }
    subtract_score_projection(&mut sigma, cross, info)?;
    wald_form(table, &sigma)
}

fn subtract_score_projection(sigma: &mut DMatrix<f64>, cross: &DMatrix<f64>, info: &DMatrix<f64>) -> Result<()> {
    let p = info.nrows();
    if cross.nrows() != sigma.nrows() || cross.ncols() != p || info.ncols() != p {
        return Err(Error::InvalidArgument("score adjustment has mismatched dimensions".into()));
    }
    if p > 0 {
        let chol = info.clone().cholesky().ok_or(Error::SingularInformation)?;
        let info_inv_ct = chol.solve(&cross.transpose());
        *sigma -= cross * info_inv_ct;
    }
    Ok(())
}

/// `W = n d' Sigma^+ d` for a given covariance of `sqrt(n) d`.
pub fn wald_form(table: &ContingencyTable, sigma: &DMatrix<f64>) -> Result<WaldFit> {
    require_nonempty_columns(table)?;
    let dim = table.rows() * table.cols();
    if sigma.nrows() != dim || sigma.ncols() != dim {
        return Err(Error::InvalidArgument("covariance has the wrong dimension".into()));
    }
    let sp = sym_pinv(sigma, RANK_TOL);
    let min_eigenvalue = sp.eigenvalues[0];
    if min_eigenvalue < NEGATIVE_EIGEN_TOL {
        return Err(Error::CovarianceConstruction { min_eigenvalue });
    }
    let d = discrepancy(table);
    Ok(WaldFit {
        value: (table.n() as f64 * quad_form(&sp.pinv, &d)).max(0.0),
        effective_df: sp.rank,
        min_eigenvalue,
    })
}

/// Centred cell indicators `z_i`, `z_(lj) = 1{x_i in A_j} (1{v_i in U_l} - |U_l|)`,
/// as the `JL`-vector entries of observation `i` (only column block `j` is nonzero).
fn centred_indicator<'a>(labels: &Classification, widths: &'a [f64], i: usize) -> (usize, impl Iterator<Item = f64> + 'a) {
    let b = labels.bins[i];
    let block = labels.cells[i] * widths.len();
    (block, widths.iter().enumerate().map(move |(ll, w)| if ll == b { 1.0 } else { 0.0 } - w))
}

/// `C = (1/n) sum_i z_i s_i'` (`JL x p`).
pub fn score_cross_moments(labels: &Classification, widths: &[f64], n_cells: usize, scores: &DMatrix<f64>) -> DMatrix<f64> {
    let l = widths.len();
    let n = scores.nrows();
    let p = scores.ncols();
    let mut cross = DMatrix::zeros(l * n_cells, p);
    for i in 0..n {
        let (block, z) = centred_indicator(labels, widths, i);
        for (ll, zl) in z.enumerate() {
            for m in 0..p {
                cross[(block + ll, m)] += zl * scores[(i, m)];
            }
        }
    }
    cross / n as f64
}

/// `(1/n) sum_i z_i z_i'`; block diagonal with one `L x L` block per cell.
pub fn indicator_moments(labels: &Classification, widths: &[f64], n_cells: usize) -> DMatrix<f64> {
    let l = widths.len();
    let n = labels.bins.len();
    let mut m = DMatrix::zeros(l * n_cells, l * n_cells);
    for i in 0..n {
        let (block, z) = centred_indicator(labels, widths, i);
        let z: Vec<f64> = z.collect();
        for a in 0..l {
            for b in 0..l {
                m[(block + a, block + b)] += z[a] * z[b];
            }
        }
    }
    m / n.max(1) as f64
}

/// Wald statistic at the raw-data MLE `theta0_hat`, on the cells
/// `D_lj(theta0_hat)`.
///
/// The covariance is the sample covariance of the estimated influence
/// terms `z_i - C I^{-1} s_i`, i.e. `(1/n) sum z z' - C I^{-1} C'` with the
/// outer-product information `I`. It is positive semidefinite by
/// construction and its rank, the effective degrees of freedom, does not
/// shrink with the number of estimated parameters.
pub fn wald_raw_mle(
    model: &dyn ConditionalModel,
    theta0_hat: &[f64],
    data: &Dataset,
    grid: &UGrid,
    partition: &Partition,
) -> Result<WaldFit> {
    let v = rosenblatt(model, theta0_hat, data)?;
    let labels = classify(&v, data.x(), grid, partition)?;
    let table = tabulate(&labels, grid, partition.len());
    require_nonempty_columns(&table)?;
    let scores = score_matrix(model, theta0_hat, data)?;
    let info = fisher_information_estimate(model, data, theta0_hat)?;
    let cross = score_cross_moments(&labels, grid.widths(), partition.len(), &scores);
    let mut sigma = indicator_moments(&labels, grid.widths(), partition.len());
    subtract_score_projection(&mut sigma, &cross, &info)?;
    wald_form(&table, &sigma)
}

/// Inputs needed to evaluate [`wald_raw_mle`] inside [`run_test`].
#[derive(Clone, Copy)]
pub struct RawMleContext<'a> {
    pub model: &'a dyn ConditionalModel,
    pub theta: &'a [f64],
    pub data: &'a Dataset,
    pub grid: &'a UGrid,
    pub partition: &'a Partition,
}

#[derive(Clone, Copy)]
pub struct EstimatorContext<'a> {
    pub estimator: EstimatorKind,
    pub raw: Option<RawMleContext<'a>>,
}

impl<'a> EstimatorContext<'a> {
    pub fn known() -> Self {
        Self { estimator: EstimatorKind::Known, raw: None }
    }

    pub fn min_chisq() -> Self {
        Self { estimator: EstimatorKind::MinChisq, raw: None }
    }

    pub fn raw_mle(raw: RawMleContext<'a>) -> Self {
        Self { estimator: EstimatorKind::RawMle, raw: Some(raw) }
    }
}

fn positive_df(df: i64) -> Result<u32> {
    if df < 1 {
        return Err(Error::InvalidDf(df));
    }
    u32::try_from(df).map_err(|_| Error::InvalidDf(df))
}

/// Computes one statistic and its p-value.
///
/// Degrees of freedom: `wald_raw_mle` uses its effective rank; other
/// statistics use the policy's base count minus `p_adjust`, except that
/// Pearson-type statistics at the raw-data MLE report the Chernoff-Lehmann
/// bracket `[base - p_adjust, base]` together with the matching p-value
/// interval. With `L = 1` every statistic is zero and `p = 1`.
pub fn run_test(kind: StatKind, table: &ContingencyTable, policy: DfPolicy, ctx: &EstimatorContext<'_>) -> Result<TestReport> {
    let mut warnings = Vec::new();
    let mut wald_rank = None;
    let value = match kind {
        StatKind::Pearson => pearson_stat(table)?,
        StatKind::Lm => lm_stat(table)?,
        StatKind::Lr => {
            let g2 = lr_stat(table)?;
            if has_zero_cell(table) {
                warnings.push(Warning::ZeroObservedCell);
            }
            g2
        }
        StatKind::Neyman => neyman_stat(table)?,
        StatKind::WaldNull => {
            if ctx.estimator == EstimatorKind::RawMle {
                return Err(Error::InvalidArgument(
                    "use wald_raw_mle for parameters estimated from the raw data".into(),
                ));
            }
            let fit = wald_null_quadform(table)?;
            let expected = table.rows() * table.cols() - 1;
            if fit.effective_df < expected {
                warnings.push(Warning::RankDeficiency { expected, found: fit.effective_df });
            }
            fit.value
        }
        StatKind::WaldRawMle => {
            let fit = match (ctx.estimator, ctx.raw) {
                (EstimatorKind::RawMle, Some(raw)) => {
                    wald_raw_mle(raw.model, raw.theta, raw.data, raw.grid, raw.partition)?
                }
                (EstimatorKind::RawMle, None) => {
                    return Err(Error::InvalidArgument("wald_raw_mle needs the raw-MLE context".into()))
                }
                (EstimatorKind::Known, _) => {
                    wald_adjusted(table, &DMatrix::zeros(table.rows() * table.cols(), 0), &DMatrix::zeros(0, 0))?
                }
                (EstimatorKind::MinChisq, _) => {
                    return Err(Error::InvalidArgument(
                        "wald_raw_mle applies to the raw-data MLE, not the grouped estimator".into(),
                    ))
                }
            };
            wald_rank = Some(fit.effective_df);
            fit.value
        }
    };

    if table.rows() == 1 {
        warnings.push(Warning::DegenerateGrid);
        return Ok(TestReport {
            kind,
            value,
            df: Df::Point(0),
            p_value: PValue::Point(1.0),
            estimator: ctx.estimator,
            warnings,
        });
    }

    let base = policy.convention.base_df(table.rows(), table.cols());
    let reduced = base - policy.p_adjust as i64;
    let (df, p_value) = match (kind, wald_rank) {
        (_, Some(rank)) => {
            let d = positive_df(rank as i64)?;
            (Df::Point(d), PValue::Point(chisq_sf(value, d)?))
        }
        (StatKind::Pearson | StatKind::Lm | StatKind::Lr | StatKind::Neyman, None)
            if ctx.estimator == EstimatorKind::RawMle =>
        {
            let lo = positive_df(reduced)?;
            let hi = positive_df(base)?;
            let p = PValue::Interval { lo: chisq_sf(value, lo)?, hi: chisq_sf(value, hi)? };
            (Df::Interval(lo, hi), p)
        }
        _ => {
            let d = positive_df(reduced)?;
            (Df::Point(d), PValue::Point(chisq_sf(value, d)?))
        }
    };
    Ok(TestReport { kind, value, df, p_value, estimator: ctx.estimator, warnings })
}
