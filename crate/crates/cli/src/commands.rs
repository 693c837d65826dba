use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use condchi_core::estimate::{min_chisq_estimate, raw_mle};
use condchi_core::mc::{run_experiment, ModelId, PartitionRule, SimConfig, SimResult};
use condchi_core::model::rosenblatt;
use condchi_core::stats::{run_test, EstimatorContext, RawMleContext, TestReportDoc};
use condchi_core::tabulate::{cross_classify, TableDoc};
use condchi_core::{
    Balance, ConditionalModel, Dataset, DfConvention, DfPolicy, EstimatorKind, OptimizerConfig, ParamVector, Partition,
    StatKind, UGrid,
};
use serde::Serialize;
use serde_json::Value;

use crate::data::{read_covariates, read_dataset};
use crate::{CliError, DfPolicyArg, EstimatorArg, ModelArg, PartitionArgs, RuleArg, SimulateArgs, TestArgs};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// How the covariate partition of a `test` run is obtained.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum PartitionSource {
    Rule {
        #[serde(flatten)]
        rule: PartitionRule,
        seed: u64,
    },
    File { file: PathBuf },
}

/// Fully resolved configuration of a `test` run, echoed in the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub y: String,
    pub x: Vec<String>,
    pub model: ModelId,
    pub estimator: EstimatorKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    #[serde(rename = "L")]
    pub l: usize,
    pub partition: PartitionSource,
    pub stats: Vec<StatKind>,
    pub df_policy: DfConvention,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Seeds {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<u64>,
    pub optimizer: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestDocument {
    pub config: RunConfig,
    pub n: usize,
    /// Parameter value the cells were evaluated at.
    pub theta: Vec<f64>,
    pub table: TableDoc,
    pub results: Vec<TestReportDoc>,
    pub seeds: Seeds,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionConfig {
    pub data: PathBuf,
    pub x: Vec<String>,
    pub rule: RuleArg,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cuts: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionDocument {
    pub config: PartitionConfig,
    pub n: usize,
    pub k: usize,
    pub cells: usize,
    pub partition: Partition,
    pub counts: Vec<usize>,
    pub balance: Balance,
    pub version: String,
}

fn parse_cuts(s: &str) -> Result<Vec<Vec<f64>>, CliError> {
    s.split(';')
        .map(|axis| {
            axis.split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(|v| v.parse::<f64>().map_err(|_| CliError::Usage(format!("--cuts: {v:?} is not a number"))))
                .collect()
        })
        .collect()
}

fn parse_stat(name: &str, estimator: EstimatorKind) -> Result<StatKind, CliError> {
    match name.trim() {
        "wald" if estimator == EstimatorKind::RawMle => Ok(StatKind::WaldRawMle),
        "wald" => Ok(StatKind::WaldNull),
        other => other.parse().map_err(|e: condchi_core::Error| CliError::Usage(e.to_string())),
    }
}

fn model_id(m: ModelArg) -> ModelId {
    match m {
        ModelArg::GaussianLinear => ModelId::GaussianLinear,
        ModelArg::ExponentialRegression => ModelId::ExponentialRegression,
    }
}

fn rule_from(rule: RuleArg, t: usize, r: usize, cuts: Option<&str>) -> Result<PartitionRule, CliError> {
    Ok(match rule {
        RuleArg::Grid => {
            let cuts = cuts.ok_or_else(|| CliError::Usage("--partition grid needs --cuts or --partition-file".into()))?;
            PartitionRule::Grid { cuts: parse_cuts(cuts)? }
        }
        RuleArg::Gessaman => PartitionRule::Gessaman { t },
        RuleArg::Rtp => PartitionRule::Rtp { t, r, equal_depth: false },
    })
}

impl RunConfig {
    pub fn from_args(a: &TestArgs) -> Result<Self, CliError> {
        let estimator = match a.estimator {
            EstimatorArg::Known => EstimatorKind::Known,
            EstimatorArg::Raw => EstimatorKind::RawMle,
            EstimatorArg::Grouped => EstimatorKind::MinChisq,
        };
        if estimator == EstimatorKind::Known && a.theta.is_none() {
            return Err(CliError::Usage("--estimator known requires --theta".into()));
        }
        let mut stats = Vec::new();
        for s in &a.stats {
            let kind = parse_stat(s, estimator)?;
            if !stats.contains(&kind) {
                stats.push(kind);
            }
        }
        if stats.is_empty() {
            return Err(CliError::Usage("--stats is empty".into()));
        }
        let partition = match (&a.partition_file, a.partition) {
            (Some(file), _) => PartitionSource::File { file: file.clone() },
            (None, rule) => PartitionSource::Rule { rule: rule_from(rule, a.t, a.r, a.cuts.as_deref())?, seed: a.seed },
        };
        Ok(RunConfig {
            data: a.data.clone(),
            y: a.y.clone(),
            x: a.x.clone(),
            model: model_id(a.model),
            estimator,
            theta: a.theta.clone(),
            l: a.l,
            partition,
            stats,
            df_policy: match a.df_policy {
                DfPolicyArg::Conditional => DfConvention::Conditional,
                DfPolicyArg::Unconditional => DfConvention::Unconditional,
            },
            optimizer: OptimizerConfig { seed: a.seed, ..OptimizerConfig::default() },
        })
    }
}

/// Reads a partition from a partition document or a bare partition JSON.
pub fn load_partition(path: &Path) -> Result<Partition, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: invalid JSON: {e}", path.display())))?;
    if let Some(inner) = value.get_mut("partition") {
        value = inner.take();
    }
    serde_json::from_value(value).map_err(|e| CliError::Data(format!("{}: invalid partition: {e}", path.display())))
}

fn build_partition(source: &PartitionSource, data: &Dataset) -> Result<Partition, CliError> {
    let partition = match source {
        PartitionSource::File { file } => load_partition(file)?,
        PartitionSource::Rule { rule, seed } => {
            let need = rule.cell_count(data.k());
            if !matches!(rule, PartitionRule::Grid { .. }) && data.n() < need {
                return Err(condchi_core::Error::InsufficientData { required: need, available: data.n() }.into());
            }
            rule.build(data.x(), *seed)?
        }
    };
    if partition.k() != data.k() {
        return Err(CliError::Usage(format!(
            "partition has dimension {} but {} x columns were given",
            partition.k(),
            data.k()
        )));
    }
    Ok(partition)
}

fn estimate(cfg: &RunConfig, model: &dyn ConditionalModel, data: &Dataset, grid: &UGrid, partition: &Partition) -> Result<ParamVector, CliError> {
    Ok(match cfg.estimator {
        EstimatorKind::Known => {
            let theta = ParamVector(cfg.theta.clone().unwrap_or_default());
            model.check_params(&theta)?;
            theta
        }
        EstimatorKind::RawMle => raw_mle(model, data, &cfg.optimizer)?,
        EstimatorKind::MinChisq => {
            let init = raw_mle(model, data, &cfg.optimizer)?;
            min_chisq_estimate(model, data, grid, partition, &init, &cfg.optimizer)?
        }
    })
}

/// Runs the test pipeline on an already loaded dataset.
pub fn test_dataset(cfg: &RunConfig, data: &Dataset) -> Result<TestDocument, CliError> {
    let model = cfg.model.build(data.k());
    let grid = UGrid::balanced(cfg.l)?;
    let partition = build_partition(&cfg.partition, data)?;
    let theta = estimate(cfg, model.as_ref(), data, &grid, &partition)?;
    let v = rosenblatt(model.as_ref(), &theta, data)?;
    let table = cross_classify(&v, data.x(), &grid, &partition)?;
    let ctx = match cfg.estimator {
        EstimatorKind::Known => EstimatorContext::known(),
        EstimatorKind::MinChisq => EstimatorContext::min_chisq(),
        EstimatorKind::RawMle => EstimatorContext::raw_mle(RawMleContext {
            model: model.as_ref(),
            theta: &theta,
            data,
            grid: &grid,
            partition: &partition,
        }),
    };
    let p_adjust = if cfg.estimator == EstimatorKind::Known { 0 } else { model.param_dim() };
    let policy = DfPolicy { convention: cfg.df_policy, p_adjust };
    let results = cfg
        .stats
        .iter()
        .map(|&kind| run_test(kind, &table, policy, &ctx).map(|r| r.to_doc()))
        .collect::<condchi_core::Result<Vec<_>>>()?;
    let partition_seed = match &cfg.partition {
        PartitionSource::Rule { rule: PartitionRule::Rtp { .. }, seed } => Some(*seed),
        _ => None,
    };
    Ok(TestDocument {
        config: cfg.clone(),
        n: data.n(),
        theta: theta.into_inner(),
        table: table.to_doc(),
        results,
        seeds: Seeds { partition: partition_seed, optimizer: cfg.optimizer.seed },
        version: VERSION.to_string(),
    })
}

/// `test`: loads the CSV named in `cfg` and runs the pipeline.
pub fn cmd_test(cfg: &RunConfig) -> Result<TestDocument, CliError> {
    let data = read_dataset(&cfg.data, &cfg.y, &cfg.x)?;
    test_dataset(cfg, &data)
}

const SIM_FIELDS: &[&str] = &[
    "dgp", "model", "estimator", "theta", "L", "partition", "stats", "levels", "replications", "master_seed",
    "df_convention", "optimizer",
];
const SIM_REQUIRED: &[&str] = &["dgp", "model", "estimator", "L", "partition", "stats", "replications", "master_seed"];
const DGP_FIELDS: &[&str] = &["family", "true_params", "k", "covariates", "n"];
const DGP_REQUIRED: &[&str] = &["family", "true_params", "k", "n"];
const OPTIMIZER_FIELDS: &[&str] = &["max_iterations", "tolerance", "restarts", "seed"];
const PARTITION_FIELDS: &[&str] = &["rule", "cuts", "T", "r", "equal_depth"];

fn check_object(value: &Value, at: &str, known: &[&str], required: &[&str], problems: &mut Vec<String>) {
    let Some(obj) = value.as_object() else {
        problems.push(format!("{at}: expected an object"));
        return;
    };
    for key in obj.keys().filter(|k| !known.contains(&k.as_str())) {
        problems.push(format!("{at}{key}: unknown field"));
    }
    for key in required.iter().filter(|k| !obj.contains_key(**k)) {
        problems.push(format!("{at}{key}: missing field"));
    }
}

/// Parses a simulation config, listing every unknown or missing field.
pub fn parse_sim_config(text: &str) -> Result<SimConfig, CliError> {
    let value: Value = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config is not valid JSON: {e}")))?;
    let mut problems = Vec::new();
    check_object(&value, "", SIM_FIELDS, SIM_REQUIRED, &mut problems);
    if let Some(dgp) = value.get("dgp") {
        check_object(dgp, "dgp.", DGP_FIELDS, DGP_REQUIRED, &mut problems);
    }
    if let Some(opt) = value.get("optimizer") {
        check_object(opt, "optimizer.", OPTIMIZER_FIELDS, &[], &mut problems);
    }
    if let Some(p) = value.get("partition") {
        check_object(p, "partition.", PARTITION_FIELDS, &["rule"], &mut problems);
    }
    if !problems.is_empty() {
        return Err(CliError::Usage(format!("invalid simulation config: {}", problems.join("; "))));
    }
    let cfg: SimConfig =
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid simulation config: {e}")))?;
    cfg.validate().map_err(|e| CliError::Usage(format!("invalid simulation config: {e}")))?;
    Ok(cfg)
}

/// `simulate`: runs the experiment described by the config file.
pub fn cmd_simulate(config: &Path) -> Result<SimResult, CliError> {
    let text = fs::read_to_string(config).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", config.display())))?;
    let cfg = parse_sim_config(&text)?;
    Ok(run_experiment(&cfg)?)
}

/// `partition`: builds the partition and reports per-cell counts.
pub fn cmd_partition(a: &PartitionArgs) -> Result<PartitionDocument, CliError> {
    let x = read_covariates(&a.data, &a.x)?;
    let rule = rule_from(a.rule, a.t, a.r, a.cuts.as_deref())?;
    let need = rule.cell_count(x.k());
    if a.rule != RuleArg::Grid && x.n() < need {
        return Err(CliError::Data(format!(
            "rule {:?} with k = {} builds {need} cells and needs at least n = {need} observations, got {}",
            a.rule,
            x.k(),
            x.n()
        )));
    }
    let partition = rule.build(&x, a.seed)?;
    let counts = partition.cell_counts(&x)?;
    let (t, r, seed, cuts) = match &rule {
        PartitionRule::Grid { cuts } => (None, None, None, Some(cuts.clone())),
        PartitionRule::Gessaman { t } => (Some(*t), None, None, None),
        PartitionRule::Rtp { t, r, .. } => (Some(*t), Some(*r), Some(a.seed), None),
    };
    Ok(PartitionDocument {
        config: PartitionConfig { data: a.data.clone(), x: a.x.clone(), rule: a.rule, t, r, seed, cuts },
        n: x.n(),
        k: x.k(),
        cells: partition.len(),
        balance: Balance::of(&counts),
        counts,
        partition,
        version: VERSION.to_string(),
    })
}

fn to_json<T: Serialize>(doc: &T) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("documents serialize");
    s.push('\n');
    s
}

/// Writes `json` to `out`, or to stdout when `out` is `None`; the
/// human-readable `table` goes to stdout in the first case, stderr in the
/// second.
fn emit(json: &str, table: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => {
            fs::write(path, json).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
            print!("{table}");
        }
        None => {
            eprint!("{table}");
            print!("{json}");
        }
    }
    Ok(())
}

fn fmt_p(p: f64) -> String {
    if p != 0.0 && p < 1e-4 {
        format!("{p:.3e}")
    } else {
        format!("{p:.4}")
    }
}

pub fn render_test_table(doc: &TestDocument) -> String {
    let mut s = format!("{:<14}{:>12}{:>12}{:>24}\n", "stat", "value", "df", "p");
    for r in &doc.results {
        let df = match (r.df, r.df_interval) {
            (Some(d), _) => d.to_string(),
            (_, Some([lo, hi])) => format!("[{lo}, {hi}]"),
            _ => "-".into(),
        };
        let p = match (r.p, r.p_interval) {
            (Some(p), _) => fmt_p(p),
            (_, Some([lo, hi])) => format!("[{}, {}]", fmt_p(lo), fmt_p(hi)),
            _ => "-".into(),
        };
        let _ = writeln!(s, "{:<14}{:>12.4}{:>12}{:>24}", r.kind.as_str(), r.value, df, p);
        for w in &r.warnings {
            let _ = writeln!(s, "  warning: {}", serde_json::to_string(w).unwrap_or_default());
        }
    }
    s
}

pub fn render_sim_table(result: &SimResult) -> String {
    let mut s = format!(
        "{:<14}{:>8}{:>8}{:>10}{:>10}{:>12}{:>10}\n",
        "stat", "level", "rejects", "rate", "mc_se", "mean", "ks"
    );
    for row in &result.per_stat {
        let ks = row.ks_uniform.map_or_else(|| "-".to_string(), |d| format!("{d:.4}"));
        let _ = writeln!(
            s,
            "{:<14}{:>8}{:>8}{:>10.4}{:>10.4}{:>12.3}{:>10}",
            row.kind.as_str(),
            row.level,
            row.rejections,
            row.rate,
            row.mc_se,
            row.mean_stat,
            ks
        );
    }
    let _ = writeln!(s, "completed {} of {}, failures {}", result.completed, result.config.replications, result.failures.len());
    s
}

pub(crate) fn run_test_command(a: &TestArgs) -> Result<(), CliError> {
    let cfg = RunConfig::from_args(a)?;
    let doc = cmd_test(&cfg)?;
    emit(&to_json(&doc), &render_test_table(&doc), a.out.as_deref())
}

pub(crate) fn run_simulate_command(a: &SimulateArgs) -> Result<(), CliError> {
    let result = cmd_simulate(&a.config)?;
    emit(&to_json(&result), &render_sim_table(&result), a.out.as_deref())
}

pub(crate) fn run_partition_command(a: &PartitionArgs) -> Result<(), CliError> {
    let doc = cmd_partition(a)?;
    let table = format!(
        "{} cells, counts {:?}, max {}, min {}\n",
        doc.cells, doc.counts, doc.balance.max, doc.balance.min
    );
    emit(&to_json(&doc), &table, a.out.as_deref())
}
