use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use condchi_cli::commands::test_dataset;
use condchi_cli::data::read_dataset;
use condchi_cli::RunConfig;
use condchi_core::mc::{DgpSpec, Family, ModelId, PartitionRule};
use condchi_core::rng::substream;
use condchi_core::{Dataset, DfConvention, EstimatorKind, OptimizerConfig, ParamVector, StatKind};
use condchi_cli::commands::PartitionSource;
use serde_json::Value;
use tempfile::TempDir;

fn condchi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condchi")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_csv(path: &Path, data: &Dataset) {
    let k = data.k();
    let mut s = String::from("y");
    for d in 0..k {
        s.push_str(&format!(",x{}", d + 1));
    }
    s.push('\n');
    for (y, x) in data.observations() {
        s.push_str(&format!("{y:?}"));
        for v in x {
            s.push_str(&format!(",{v:?}"));
        }
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

fn null_fixture(dir: &TempDir, n: usize, k: usize, seed: u64) -> PathBuf {
    let mut theta = vec![0.5, 1.0];
    theta.extend(std::iter::repeat_n(-1.0, k - 1));
    theta.push(1.0);
    let dgp = DgpSpec { family: Family::GaussianLinear, true_params: ParamVector(theta), k, covariates: Default::default(), n };
    let data = dgp.simulate(&mut substream(seed, 0)).unwrap();
    let path = dir.path().join(format!("null_{n}_{k}_{seed}.csv"));
    write_csv(&path, &data);
    path
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn raw_mle_report_has_pearson_interval() {
    let dir = TempDir::new().unwrap();
    let csv = null_fixture(&dir, 500, 2, 1);
    let out = dir.path().join("report.json");
    let o = condchi(&[
        "test", "--data", csv.to_str().unwrap(), "--y", "y", "--x", "x1,x2", "--model", "gaussian-linear",
        "--estimator", "raw", "--L", "4", "--partition", "rtp", "--T", "2", "--r", "2", "--seed", "7",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = json(&out);
    let pearson = &report["results"][0];
    assert_eq!(pearson["kind"], "pearson");
    assert_eq!(pearson["df_interval"], serde_json::json!([11, 15]));
    let p = pearson["p_interval"].as_array().unwrap();
    assert!(p[0].as_f64().unwrap() <= p[1].as_f64().unwrap());
    assert_eq!(report["results"][2]["kind"], "wald_raw_mle");
    assert_eq!(report["seeds"]["partition"], 7);
    assert_eq!(report["table"]["column_counts"].as_array().unwrap().len(), 5);
    assert_eq!(report["theta"].as_array().unwrap().len(), 4);
    assert!(report["version"].is_string());
}

#[test]
fn single_bin_grid_gives_zero_statistics() {
    let dir = TempDir::new().unwrap();
    let csv = null_fixture(&dir, 200, 1, 2);
    let out = dir.path().join("r.json");
    let o = condchi(&["test", "--data", csv.to_str().unwrap(), "--y", "y", "--x", "x1", "--L", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for r in json(&out)["results"].as_array().unwrap() {
        assert_eq!(r["value"], 0.0);
        assert_eq!(r["p"], 1.0);
        assert!(r["warnings"].as_array().unwrap().contains(&Value::from("degenerate_grid")));
    }
}

#[test]
fn data_errors_exit_with_three() {
    let dir = TempDir::new().unwrap();
    let csv = null_fixture(&dir, 50, 1, 3);
    let path = csv.to_str().unwrap();

    let o = condchi(&["test", "--data", path, "--y", "response", "--x", "x1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("\"response\""), "{}", stderr(&o));

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let o = condchi(&["test", "--data", empty.to_str().unwrap(), "--y", "y", "--x", "x1"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let header_only = dir.path().join("header.csv");
    fs::write(&header_only, "y,x1\n").unwrap();
    let o = condchi(&["test", "--data", header_only.to_str().unwrap(), "--y", "y", "--x", "x1"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "y,x1\n1.0,0.5\n2.0,abc\n3.0,0.1\n").unwrap();
    let o = condchi(&["test", "--data", bad.to_str().unwrap(), "--y", "y", "--x", "x1"]);
    assert_eq!(o.status.code(), Some(3));
    let msg = stderr(&o);
    assert!(msg.contains("row 2") && msg.contains("\"x1\""), "{msg}");

    let nan = dir.path().join("nan.csv");
    fs::write(&nan, "y,x1\n1.0,0.5\nNaN,0.2\n").unwrap();
    let o = condchi(&["test", "--data", nan.to_str().unwrap(), "--y", "y", "--x", "x1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("row 2"), "{}", stderr(&o));

    let missing = dir.path().join("nope.csv");
    let o = condchi(&["test", "--data", missing.to_str().unwrap(), "--y", "y", "--x", "x1"]);
    assert_eq!(o.status.code(), Some(3));

    let o = condchi(&["partition", "--data", path, "--x", "x1", "--rule", "rtp", "--T", "2", "--r", "60"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("n = 61"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let csv = null_fixture(&dir, 50, 1, 4);
    let path = csv.to_str().unwrap();
    assert_eq!(condchi(&["test", "--data", path, "--y", "y", "--x", "x1", "--bogus"]).status.code(), Some(2));
    assert_eq!(condchi(&["test", "--data", path, "--y", "y", "--x", "x1", "--estimator", "known"]).status.code(), Some(2));
    assert_eq!(condchi(&["test", "--data", path, "--y", "y", "--x", "x1", "--stats", "chi"]).status.code(), Some(2));
    assert_eq!(condchi(&["test", "--data", path, "--y", "y", "--x", "x1", "--partition", "grid"]).status.code(), Some(2));
    let o = condchi(&["test", "--data", path, "--y", "y", "--x", "x1", "--estimator", "known", "--theta", "0,1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(condchi(&[]).status.code(), Some(2));
    assert_eq!(condchi(&["--help"]).status.code(), Some(0));

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"dgp": {"family": "gaussian_linear", "true_params": [0, 1, 1], "k": 1, "n": 50, "noise": 1},
        "model": "gaussian_linear", "estimator": "raw_mle", "partition": {"rule": "gessaman", "T": 2},
        "stats": ["pearson"], "replications": 3, "master_seed": 1, "colour": "red"}"#).unwrap();
    let o = condchi(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("colour") && msg.contains("dgp.noise") && msg.contains("L: missing"), "{msg}");
}

#[test]
fn computation_errors_exit_with_four() {
    let dir = TempDir::new().unwrap();
    let flat = dir.path().join("flat.csv");
    let mut s = String::from("y,x1\n");
    for i in 0..40 {
        s.push_str(&format!("{},{}\n", 1.0 + 2.0 * i as f64, i));
    }
    fs::write(&flat, s).unwrap();
    let o = condchi(&["test", "--data", flat.to_str().unwrap(), "--y", "y", "--x", "x1"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn partition_command_examples() {
    let dir = TempDir::new().unwrap();
    let csv = null_fixture(&dir, 64, 1, 5);
    let out = dir.path().join("p.json");
    let o = condchi(&["partition", "--data", csv.to_str().unwrap(), "--x", "x1", "--rule", "gessaman", "--T", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(json(&out)["counts"], serde_json::json!([32, 32]));

    let csv3 = null_fixture(&dir, 300, 3, 6);
    let o = condchi(&["partition", "--data", csv3.to_str().unwrap(), "--x", "x1,x2,x3", "--rule", "rtp", "--T", "2", "--r", "2", "--seed", "9", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = json(&out);
    assert_eq!(doc["cells"], 7);
    assert_eq!(doc["partition"]["cells"].as_array().unwrap().len(), 7);

    // Smallest cell holding 5 points: the largest holds at most 11.
    let mut seen = 0;
    for n in 18..40 {
        let csv = null_fixture(&dir, n, 1, n as u64);
        let o = condchi(&["partition", "--data", csv.to_str().unwrap(), "--x", "x1", "--rule", "rtp", "--T", "2", "--r", "3", "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        let doc = json(&out);
        if doc["balance"]["min"] == 5 {
            seen += 1;
            assert!(doc["balance"]["max"].as_u64().unwrap() <= 11);
        }
    }
    assert!(seen > 0);
}

fn run_config(csv: &Path, partition: PartitionSource) -> RunConfig {
    RunConfig {
        data: csv.to_path_buf(),
        y: "y".into(),
        x: vec!["x1".into(), "x2".into()],
        model: ModelId::GaussianLinear,
        estimator: EstimatorKind::RawMle,
        theta: None,
        l: 4,
        partition,
        stats: vec![StatKind::Pearson, StatKind::Lr, StatKind::WaldRawMle],
        df_policy: DfConvention::Conditional,
        optimizer: OptimizerConfig::default(),
    }
}

#[test]
fn partition_document_round_trips_through_test() {
    let dir = TempDir::new().unwrap();
    let csv = null_fixture(&dir, 400, 2, 8);
    let out = dir.path().join("p.json");
    let o = condchi(&["partition", "--data", csv.to_str().unwrap(), "--x", "x1,x2", "--rule", "rtp", "--T", "2", "--r", "2", "--seed", "11", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));

    let data = read_dataset(&csv, "y", &["x1".into(), "x2".into()]).unwrap();
    let in_process = test_dataset(
        &run_config(&csv, PartitionSource::Rule { rule: PartitionRule::Rtp { t: 2, r: 2, equal_depth: false }, seed: 11 }),
        &data,
    )
    .unwrap();
    let from_file = test_dataset(&run_config(&csv, PartitionSource::File { file: out.clone() }), &data).unwrap();
    assert_eq!(in_process.table, from_file.table);
    assert_eq!(in_process.results, from_file.results);
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let csv = null_fixture(&dir, 300, 2, 10);
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for out in [&a, &b] {
        let o = condchi(&["test", "--data", csv.to_str().unwrap(), "--y", "y", "--x", "x1,x2", "--estimator", "grouped", "--seed", "3", "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let cfg = dir.path().join("sim.json");
    fs::write(&cfg, r#"{"dgp": {"family": "gaussian_linear", "true_params": [0.5, 1.0, 1.0], "k": 1, "n": 200},
        "model": "gaussian_linear", "estimator": "raw_mle", "L": 4, "partition": {"rule": "rtp", "T": 2, "r": 2},
        "stats": ["pearson", "wald_raw_mle"], "replications": 50, "master_seed": 4}"#).unwrap();
    for out in [&a, &b] {
        let o = condchi(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn single_replication_rates_are_zero_or_one() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sim.json");
    fs::write(&cfg, r#"{"dgp": {"family": "gaussian_linear", "true_params": [0.0, 1.0, 1.0], "k": 1, "n": 100},
        "model": "gaussian_linear", "estimator": "known", "theta": [0.0, 1.0, 1.0], "L": 3,
        "partition": {"rule": "grid", "cuts": [[0.0]]}, "stats": ["pearson", "lr"], "replications": 1, "master_seed": 2}"#).unwrap();
    let out = dir.path().join("r.json");
    let o = condchi(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = json(&out);
    for row in doc["per_stat"].as_array().unwrap() {
        let rate = row["rate"].as_f64().unwrap();
        assert!(rate == 0.0 || rate == 1.0);
        for key in ["kind", "level", "rejections", "mc_se", "mean_stat"] {
            assert!(row.get(key).is_some(), "{key}");
        }
    }
    assert!(doc["failures"].as_array().unwrap().is_empty());
}
