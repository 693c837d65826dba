//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The process fails when a criterion fails, except for failures listed in
//! `KNOWN_UNATTAINABLE`, which are printed as FAIL with the reason and do
//! not change the exit status.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use condchi_core::mc::{
    calibrate_df, ks_uniform_distance, run_experiment, CovariateLaw, DgpSpec, Family, ModelId, PartitionRule, SimConfig,
};
use condchi_core::model::rosenblatt;
use condchi_core::partition::{gessaman_partition, rtp_cell_count, rtp_partition_with, RtpOptions};
use condchi_core::rng::substream;
use condchi_core::special::chisq_sf;
use condchi_core::stats::{lm_stat, pearson_stat, wald_null_quadform};
use condchi_core::{
    Balance, ContingencyTable, Covariates, EstimatorKind, GaussianLinearModel, OptimizerConfig, ParamVector, StatKind,
};
use quadrature::double_exponential::integrate;
use rand::Rng;

const KNOWN_UNATTAINABLE: &[(u32, &str)] = &[(
    2,
    "max <= T min + 1 cannot hold for T >= 3 under equal-count splits (k=1, T=3, r=2, n=104 gives counts \
     35,34,12,12,11); T = 2 and the bound T min + T - 1 are checked separately",
)];

const TRUTH: [f64; 4] = [0.5, 1.0, -1.0, 1.0];
const BAND: (f64, f64) = (0.037, 0.063);

struct Outcome {
    pass: bool,
    detail: String,
    /// The failure matches the documented unattainable part and nothing else.
    known: bool,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail, known: false }
    }
}

fn in_band(rate: f64) -> bool {
    (BAND.0..=BAND.1).contains(&rate)
}

fn null_cfg(estimator: EstimatorKind, partition: PartitionRule, stats: Vec<StatKind>) -> SimConfig {
    SimConfig {
        dgp: DgpSpec {
            family: Family::GaussianLinear,
            true_params: ParamVector(TRUTH.to_vec()),
            k: 2,
            covariates: CovariateLaw::Uniform,
            n: 500,
        },
        model: ModelId::GaussianLinear,
        estimator,
        theta: (estimator == EstimatorKind::Known).then(|| ParamVector(TRUTH.to_vec())),
        l: 4,
        partition,
        stats,
        levels: vec![0.05],
        replications: 2_000,
        master_seed: 1,
        df_convention: Default::default(),
        optimizer: OptimizerConfig::default(),
    }
}

fn rtp22() -> PartitionRule {
    PartitionRule::Rtp { t: 2, r: 2, equal_depth: false }
}

fn identity_suite() -> Outcome {
    let mut rng = substream(2024, 1);
    let (mut worst_lm, mut worst_wald) = (0.0f64, 0.0f64);
    for _ in 0..1_000 {
        let l = rng.random_range(2..=6);
        let j = rng.random_range(1..=6);
        let counts: Vec<Vec<u64>> = (0..l).map(|_| (0..j).map(|_| rng.random_range(1..=200)).collect()).collect();
        let t = ContingencyTable::from_counts(&counts, vec![1.0 / l as f64; l]).unwrap();
        let x2 = pearson_stat(&t).unwrap();
        worst_lm = worst_lm.max((x2 - lm_stat(&t).unwrap()).abs());
        worst_wald = worst_wald.max((x2 - wald_null_quadform(&t).unwrap().value).abs());
    }
    Outcome::new(
        worst_lm <= 1e-12 && worst_wald <= 1e-8,
        format!("1000 tables: max |X2 - LM| = {worst_lm:.1e}, max |X2 - W| = {worst_wald:.1e}"),
    )
}

fn uniform_x(rng: &mut impl Rng, n: usize, k: usize) -> Covariates {
    Covariates::new((0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect(), k).unwrap()
}

fn distinct_per_axis(x: &Covariates) -> bool {
    (0..x.k()).all(|d| {
        let mut v: Vec<f64> = (0..x.n()).map(|i| x.get(i, d)).collect();
        v.sort_by(f64::total_cmp);
        v.windows(2).all(|w| w[0] < w[1])
    })
}

fn partition_bounds() -> Outcome {
    let mut rng = substream(2024, 2);

    let mut gessaman_bad = 0;
    for _ in 0..200 {
        let (k, t): (usize, usize) = (rng.random_range(1..=3), rng.random_range(2..=4));
        let n = t.pow(k as u32) + rng.random_range(0..200);
        let x = uniform_x(&mut rng, n, k);
        assert!(distinct_per_axis(&x));
        let counts = gessaman_partition(&x, t).unwrap().cell_counts(&x).unwrap();
        if Balance::of(&counts).spread > 1 {
            gessaman_bad += 1;
        }
    }

    let (mut count_bad, mut stated_bad, mut stated_bad_t2, mut tight_bad, mut t2_runs) = (0, 0, 0, 0, 0);
    let mut example = String::new();
    for _ in 0..200 {
        let (k, t, r): (usize, usize, usize) = (rng.random_range(1..=4), rng.random_range(2..=4), rng.random_range(1..=3));
        let opts = RtpOptions { t, r, seed: rng.random(), equal_depth: false };
        let j = 1 + k * r * (t - 1);
        let n = j + rng.random_range(0..300);
        let x = uniform_x(&mut rng, n, k);
        let built = rtp_partition_with(&x, &opts).unwrap();
        if built.partition.len() != j || built.tree.terminals().count() != j || rtp_cell_count(k, &opts) != j {
            count_bad += 1;
        }
        let b = Balance::of(&built.partition.cell_counts(&x).unwrap());
        t2_runs += usize::from(t == 2);
        if b.max > t * b.min + 1 {
            stated_bad += 1;
            stated_bad_t2 += usize::from(t == 2);
            if example.is_empty() {
                example = format!(" (e.g. k={k} T={t} r={r} n={n}: max {} min {})", b.max, b.min);
            }
        }
        if b.max > t * b.min + t - 1 {
            tight_bad += 1;
        }
    }

    let mut depth_bad = 0;
    let cases = [(1, 1, 2), (1, 3, 2), (3, 1, 2), (1, 7, 2), (7, 1, 2), (3, 5, 2), (1, 4, 3), (2, 2, 3), (4, 1, 3), (1, 13, 3)];
    for &(k, r, t) in &cases {
        for _ in 0..20 {
            let n = 1 + k * r * (t - 1) + rng.random_range(0..300);
            let x = uniform_x(&mut rng, n, k);
            let opts = RtpOptions { t, r, seed: rng.random(), equal_depth: true };
            let counts = rtp_partition_with(&x, &opts).unwrap().partition.cell_counts(&x).unwrap();
            if Balance::of(&counts).spread > 1 {
                depth_bad += 1;
            }
        }
    }

    let others_ok = gessaman_bad == 0 && count_bad == 0 && depth_bad == 0 && tight_bad == 0;
    let pass = others_ok && stated_bad == 0;
    let mut out = Outcome::new(
        pass,
        format!(
            "gessaman spread>1: {gessaman_bad}/200; cell count wrong: {count_bad}/200; \
             max > T min + 1: {stated_bad}/200{example}, of which T=2: {stated_bad_t2}/{t2_runs}; \
             max > T min + T - 1: {tight_bad}/200; equal-depth spread>1: {depth_bad}/{}",
            cases.len() * 20
        ),
    );
    out.known = !pass && others_ok && stated_bad_t2 == 0;
    out
}

fn gamma_half(df: u32) -> f64 {
    let (mut g, mut a) = if df % 2 == 0 { (1.0, 1.0) } else { (PI.sqrt(), 0.5) };
    while a < df as f64 / 2.0 {
        g *= a;
        a += 1.0;
    }
    g
}

fn chisq_density(t: f64, df: u32) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let h = df as f64 / 2.0;
    (-(t / 2.0) + (h - 1.0) * t.ln()).exp() / (2f64.powf(h) * gamma_half(df))
}

fn piecewise(f: impl Fn(f64) -> f64, a: f64, b: f64, width: f64) -> f64 {
    let (mut total, mut lo) = (0.0, a);
    while lo < b {
        let hi = (lo + width).min(b);
        total += integrate(&f, lo, hi, 1e-14).integral;
        lo = hi;
    }
    total
}

fn chisq_sf_oracle(x: f64, df: u32) -> f64 {
    if x < df as f64 {
        1.0 - piecewise(|u| 2.0 * u * chisq_density(u * u, df), 0.0, x.sqrt(), 1.0)
    } else {
        piecewise(|t| chisq_density(t, df), x, x + 200.0 + 4.0 * df as f64, 4.0)
    }
}

fn chisq_accuracy() -> Outcome {
    let mut xs = vec![0.1, 0.25, 0.5, 0.75];
    xs.extend((1..=100).map(f64::from));
    let mut worst = 0.0f64;
    for df in 1..=30 {
        for &x in &xs {
            worst = worst.max((chisq_sf(x, df).unwrap() - chisq_sf_oracle(x, df)).abs());
        }
    }
    let spot = chisq_sf(3.8415, 1).unwrap();
    Outcome::new(
        worst <= 1e-8 && (spot - 0.05).abs() <= 1e-4,
        format!("max error vs quadrature {worst:.1e} over {} points; Q(3.8415, 1) = {spot:.6}", xs.len() * 30),
    )
}

fn rate(cfg: &SimConfig, kind: StatKind) -> (f64, f64, f64) {
    let res = run_experiment(cfg).unwrap();
    let row = res.row(kind, 0.05).unwrap();
    (row.rate, row.mc_se, row.liberal_rate)
}

fn size_known_theta() -> Outcome {
    let stats = vec![StatKind::Pearson, StatKind::Lr, StatKind::WaldNull];
    let res = run_experiment(&null_cfg(EstimatorKind::Known, rtp22(), stats.clone())).unwrap();
    let rates: Vec<f64> = stats.iter().map(|&k| res.row(k, 0.05).unwrap().rate).collect();
    Outcome::new(
        rates.iter().all(|&r| in_band(r)) && res.failures.is_empty(),
        format!(
            "R=2000, J=5: pearson {:.4}, lr {:.4}, wald {:.4}; band [0.037, 0.063]",
            rates[0], rates[1], rates[2]
        ),
    )
}

fn grouping_neutrality() -> Outcome {
    let fixed = PartitionRule::Grid { cuts: vec![vec![-0.6, -0.2, 0.2, 0.6], vec![]] };
    let stats = vec![StatKind::Pearson, StatKind::Lr, StatKind::WaldNull];
    let a = run_experiment(&null_cfg(EstimatorKind::Known, fixed, stats.clone())).unwrap();
    let mut cfg = null_cfg(EstimatorKind::Known, rtp22(), stats.clone());
    cfg.master_seed = 2;
    let b = run_experiment(&cfg).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for &kind in &stats {
        let (ra, rb) = (a.row(kind, 0.05).unwrap(), b.row(kind, 0.05).unwrap());
        let pooled = (ra.mc_se.powi(2) + rb.mc_se.powi(2)).sqrt();
        let z = (ra.rate - rb.rate).abs() / pooled;
        pass &= in_band(ra.rate) && in_band(rb.rate) && z <= 3.0;
        parts.push(format!("{kind} grid {:.4} rtp {:.4} |diff|/se {z:.2}", ra.rate, rb.rate));
    }
    Outcome::new(pass, parts.join("; "))
}

fn raw_mle_wald() -> Outcome {
    let cfg = null_cfg(EstimatorKind::RawMle, rtp22(), vec![StatKind::WaldRawMle]);
    let (r, _, _) = rate(&cfg, StatKind::WaldRawMle);
    let cal = &calibrate_df(&cfg).unwrap()[0];
    let z = (cal.mean - cal.reported_df) / cal.se;
    Outcome::new(
        (0.030..=0.070).contains(&r) && z.abs() <= 3.0,
        format!(
            "rate {r:.4} (band [0.030, 0.070]); mean W {:.3} (se {:.3}) vs effective df {}: z = {z:.2}",
            cal.mean, cal.se, cal.reported_df
        ),
    )
}

fn chernoff_lehmann() -> Outcome {
    let cfg = null_cfg(EstimatorKind::RawMle, rtp22(), vec![StatKind::Pearson]);
    let (conservative, _, liberal) = rate(&cfg, StatKind::Pearson);
    Outcome::new(
        conservative <= BAND.1 && liberal >= BAND.0,
        format!("p_hi rule {conservative:.4} <= 0.063, p_lo rule {liberal:.4} >= 0.037"),
    )
}

fn power() -> Outcome {
    let mut alt = null_cfg(EstimatorKind::RawMle, PartitionRule::Gessaman { t: 4 }, vec![StatKind::Pearson]);
    alt.dgp.family = Family::GaussianHeteroskedastic;
    alt.dgp.k = 1;
    alt.dgp.true_params = ParamVector(vec![0.0, 1.0, 1.0]);
    let mut null = alt.clone();
    null.dgp.family = Family::GaussianLinear;
    let (p, _, _) = rate(&alt, StatKind::Pearson);
    let (s, _, _) = rate(&null, StatKind::Pearson);
    Outcome::new(p >= 0.20 && p > s, format!("scale 1+|x1|, n=500, R=2000: power {p:.4}, null size {s:.4}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let dgp = DgpSpec { family: Family::GaussianLinear, true_params: ParamVector(TRUTH.to_vec()), k: 2, covariates: CovariateLaw::Uniform, n: 500 };
    let data = dgp.simulate(&mut substream(77, 0)).unwrap();
    let csv = dir.path().join("data.csv");
    let mut s = String::from("y,x1,x2\n");
    for (y, x) in data.observations() {
        s.push_str(&format!("{y:?},{:?},{:?}\n", x[0], x[1]));
    }
    fs::write(&csv, s).unwrap();
    let sim = dir.path().join("sim.json");
    fs::write(
        &sim,
        r#"{"dgp": {"family": "gaussian_linear", "true_params": [0.5, 1.0, -1.0, 1.0], "k": 2, "n": 500},
            "model": "gaussian_linear", "estimator": "raw_mle", "L": 4, "partition": {"rule": "rtp", "T": 2, "r": 2},
            "stats": ["pearson", "lr", "wald_raw_mle"], "replications": 200, "master_seed": 9}"#,
    )
    .unwrap();

    let run = |args: &[&str], out: &Path| -> Vec<u8> {
        let status = Command::new(env!("CARGO_BIN_EXE_condchi"))
            .args(args)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap()
            .status;
        assert!(status.success(), "{args:?}");
        fs::read(out).unwrap()
    };
    let test_args = ["test", "--data", csv.to_str().unwrap(), "--y", "y", "--x", "x1,x2", "--estimator", "grouped", "--partition", "rtp", "--seed", "7"];
    let sim_args = ["simulate", "--config", sim.to_str().unwrap()];
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let test_same = run(&test_args, &a) == run(&test_args, &b);
    let sim_same = run(&sim_args, &a) == run(&sim_args, &b);
    Outcome::new(test_same && sim_same, format!("test report identical: {test_same}; simulate result identical: {sim_same}"))
}

fn rosenblatt_uniformity() -> Outcome {
    let n = 10_000;
    let critical = 1.63 / (n as f64).sqrt();
    let model = GaussianLinearModel::new(2);
    let dgp = DgpSpec { family: Family::GaussianLinear, true_params: ParamVector(TRUTH.to_vec()), k: 2, covariates: CovariateLaw::Normal, n };
    let mut worst = 0.0f64;
    let below = (0..100u64)
        .filter(|&seed| {
            let data = dgp.simulate(&mut substream(seed, 0)).unwrap();
            let d = ks_uniform_distance(&rosenblatt(&model, &TRUTH, &data).unwrap());
            worst = worst.max(d);
            d < critical
        })
        .count();
    Outcome::new(below >= 99, format!("{below}/100 runs below {critical:.4}; largest distance {worst:.4}"))
}

fn main() {
    type Criterion = (u32, &'static str, fn() -> Outcome, Option<Duration>);
    let criteria: [Criterion; 10] = [
        (1, "identity suite", identity_suite, Some(Duration::from_secs(10))),
        (2, "partition bounds", partition_bounds, Some(Duration::from_secs(30))),
        (3, "chisq_sf accuracy", chisq_accuracy, Some(Duration::from_secs(10))),
        (4, "size at known theta", size_known_theta, Some(Duration::from_secs(120))),
        (5, "grouping neutrality", grouping_neutrality, None),
        (6, "raw-MLE Wald", raw_mle_wald, None),
        (7, "Chernoff-Lehmann bracket", chernoff_lehmann, None),
        (8, "power", power, Some(Duration::from_secs(120))),
        (9, "determinism", determinism, None),
        (10, "Rosenblatt uniformity", rosenblatt_uniformity, None),
    ];
    let mut unexpected = 0;
    for (id, name, check, limit) in criteria {
        let start = Instant::now();
        let mut outcome = check();
        let elapsed = start.elapsed();
        if let Some(limit) = limit {
            if elapsed > limit {
                outcome.pass = false;
                outcome.known = false;
                outcome.detail.push_str(&format!("; runtime over {}s", limit.as_secs()));
            }
        }
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{verdict} [{id:>2}] {name}: {} ({:.1}s)", outcome.detail, elapsed.as_secs_f64());
        if !outcome.pass {
            match KNOWN_UNATTAINABLE.iter().find(|(k, _)| *k == id) {
                Some((_, why)) if outcome.known => println!("     known unattainable: {why}"),
                _ => unexpected += 1,
            }
        }
    }
    if unexpected > 0 {
        println!("{unexpected} criterion(s) failed");
        std::process::exit(1);
    }
}
