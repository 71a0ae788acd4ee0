//! Acceptance criteria 1 to 10. Every test prints one `PASS`/`FAIL` line
//! straight to stdout, so the lines survive output capture.
//!
//! The Biased-MNIST criterion reads IDX files from `$MNIST_DIR`, falling back
//! to `data/mnist` at the workspace root, and reports `SKIP` when neither has
//! them.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use epsmargin_core::experiment::{self, ExperimentConfig};
use epsmargin_core::fairkl;
use epsmargin_core::oracles::{self, OracleReport};
use epsmargin_core::train::{self, EncoderSpec};
use epsmargin_core::{Encoder, PenaltyKind, RegularizerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
/// Blobs: FairKL over the λ = 0 baseline, in accuracy points.
const BLOBS_MARGIN: f64 = 0.10;
const BLOBS_RUN_LIMIT: Duration = Duration::from_secs(5 * 60);
const MNIST_RUN_LIMIT: Duration = Duration::from_secs(15 * 60);
const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

// Runs share one core; serializing keeps the runtime checks honest.
static SERIAL: Mutex<()> = Mutex::new(());
static BLOBS_CACHE: Mutex<Vec<(String, u64, f64, Duration)>> = Mutex::new(Vec::new());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: usize, verdict: &str, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id:>2} {verdict} {detail}");
    let _ = out.flush();
}

fn verdict(id: usize, pass: bool, detail: &str) {
    report(id, if pass { "PASS" } else { "FAIL" }, detail);
    assert!(pass, "criterion {id}: {detail}");
}

fn rows_ok(rows: &[OracleReport], tol: f64) -> bool {
    rows.iter().all(|r| r.pass && r.max_abs_err <= tol)
}

fn worst(rows: &[OracleReport]) -> String {
    let r = rows
        .iter()
        .max_by(|a, b| a.max_abs_err.total_cmp(&b.max_abs_err))
        .expect("nonempty");
    format!("worst {}={:.2e}", r.name, r.max_abs_err)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn pct(x: &[f64]) -> String {
    let v: Vec<String> = x.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
    format!("[{}] mean {:.2}", v.join(", "), 100.0 * mean(x))
}

fn preset(name: &str, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&format!("preset:{name}")).expect("bundled preset");
    cfg.set_seed(seed);
    cfg
}

fn train_run(cfg: &ExperimentConfig) -> (f64, Duration) {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let s = experiment::run_train(cfg, dir.path()).expect("run finishes");
    (s.accuracy().overall, t.elapsed())
}

fn blobs(name: &str, seed: u64) -> (f64, Duration) {
    let hit = BLOBS_CACHE
        .lock()
        .unwrap()
        .iter()
        .find(|(n, s, _, _)| n == name && *s == seed)
        .map(|&(_, _, a, d)| (a, d));
    if let Some(hit) = hit {
        return hit;
    }
    let (acc, took) = train_run(&preset(name, seed));
    BLOBS_CACHE.lock().unwrap().push((name.to_string(), seed, acc, took));
    (acc, took)
}

fn blobs_seeds(name: &str) -> (Vec<f64>, Duration) {
    let runs: Vec<(f64, Duration)> = SEEDS.iter().map(|&s| blobs(name, s)).collect();
    (runs.iter().map(|r| r.0).collect(), runs.iter().map(|r| r.1).max().unwrap())
}

#[test]
fn criterion_01_identity_suite() {
    let _g = serial();
    let t = Instant::now();
    let rows = oracles::identity_suite(100, 0);
    let took = t.elapsed();
    let pass = rows.len() == 6 && rows_ok(&rows, 1e-9) && took < Duration::from_secs(10);
    verdict(1, pass, &format!("{} identities x 100 trials, {}, {:.2?}", rows.len(), worst(&rows), took));
}

#[test]
fn criterion_02_reductions() {
    let _g = serial();
    let rows = oracles::reduction_oracles(50, 0).unwrap();
    let pass = rows.len() == 2 && rows_ok(&rows, 1e-12);
    verdict(2, pass, &format!("50 batches, {}", worst(&rows)));
}

#[test]
fn criterion_03_estimator_ordering_and_monotonicity() {
    let _g = serial();
    let order = oracles::ordering_oracle(10_000, 0).unwrap();
    let mono = oracles::epsilon_monotonicity_oracle(1_000, 0).unwrap();
    let pass = order.pass && mono.pass && order.trials == 10_000 && mono.trials == 1_000;
    verdict(
        3,
        pass,
        &format!(
            "InfoNCE <= InfoL1O worst excess {:.2e} over {}; eps-monotone worst increase {:.2e} over {}",
            order.max_abs_err, order.trials, mono.max_abs_err, mono.trials
        ),
    );
}

#[test]
fn criterion_04_gradients() {
    let _g = serial();
    let rows = oracles::gradient_oracles(20, 0).unwrap();
    let penalties = rows.iter().filter(|r| r.name.starts_with("grad_fairkl_")).count();
    let pass = rows_ok(&rows, 1e-4) && penalties >= 6 && rows.len() >= 7 + penalties;
    verdict(4, pass, &format!("{} checks x 20 batches, {}", rows.len(), worst(&rows)));
}

#[test]
fn criterion_05_gaussian_kl() {
    let _g = serial();
    let rows = oracles::kl_oracles(fairkl::gaussian_kl, 50, 1_000_000, 0);
    let mc = &rows[0];
    let exact = rows[1..].iter().all(|r| r.pass && r.max_abs_err == 0.0);
    let pass = mc.pass && mc.max_rel_err <= 3.0 && exact;
    verdict(
        5,
        pass,
        &format!("50 draws x 1e6 samples, worst z={:.2}; self and symmetry exact={exact}", mc.max_rel_err),
    );
}

#[test]
fn criterion_06_fairkl_descent() {
    let _g = serial();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in SEEDS {
        let r = oracles::fairkl_descent_oracle(seed).unwrap();
        pass &= r.pass;
        lines.push(format!("seed {seed}: worst gap {:.3e} after {} steps", r.max_abs_err, r.trials));
    }
    let kl = RegularizerConfig { kind: PenaltyKind::Kl, ..Default::default() };
    let t = oracles::fairkl_descent(
        &kl,
        oracles::DESCENT_SPREAD,
        oracles::DESCENT_STEPS,
        oracles::DESCENT_LR,
        0,
    )
    .unwrap();
    let kl_worst = t.gaps.iter().copied().fold(0.0, f64::max);
    verdict(
        6,
        pass,
        &format!("mean_only {}; (kl kind, not gated: worst gap {kl_worst:.2e})", lines.join("; ")),
    );
}

#[test]
fn criterion_07_blobs_debiasing() {
    let _g = serial();
    let (fair, t_fair) = blobs_seeds("blobs-rho99-fairkl");
    let (base, t_base) = blobs_seeds("blobs-rho99-baseline");
    let random: Vec<f64> = SEEDS
        .iter()
        .map(|&seed| {
            let cfg = preset("blobs-rho99-fairkl", seed);
            let split = experiment::load_data(&cfg).unwrap();
            let spec = EncoderSpec::new(split.train.n_features(), &cfg.model);
            let enc = Encoder::init(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            train::linear_probe(&enc, &split.train, &split.test, &cfg.eval).unwrap().overall
        })
        .collect();
    let slowest = t_fair.max(t_base);
    let pass = mean(&fair) - mean(&base) >= BLOBS_MARGIN && mean(&fair) > mean(&random) && slowest <= BLOBS_RUN_LIMIT;
    verdict(
        7,
        pass,
        &format!(
            "fairkl {}; baseline {}; random-feature {}; slowest run {:.1?}",
            pct(&fair),
            pct(&base),
            pct(&random),
            slowest
        ),
    );
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn mnist_preset(name: &str, seed: u64, dir: &Path) -> ExperimentConfig {
    let mut cfg = preset(name, seed);
    let spec = cfg.dataset.biased_mnist.as_mut().expect("an MNIST preset");
    spec.train_images = dir.join(MNIST_FILES[0]);
    spec.train_labels = dir.join(MNIST_FILES[1]);
    spec.test_images = Some(dir.join(MNIST_FILES[2]));
    spec.test_labels = Some(dir.join(MNIST_FILES[3]));
    cfg
}

#[test]
fn criterion_08_biased_mnist_debiasing() {
    let _g = serial();
    let dir = mnist_dir();
    if !MNIST_FILES.iter().all(|f| dir.join(f).is_file()) {
        report(8, "SKIP", &format!("no MNIST IDX files in {}; set MNIST_DIR", dir.display()));
        return;
    }
    let (mut fair, mut control, mut slowest) = (Vec::new(), Vec::new(), Duration::ZERO);
    for seed in SEEDS {
        let cfg = mnist_preset("biased-mnist-0.995", seed, &dir);
        assert_eq!((cfg.objective.alpha, cfg.objective.lambda, cfg.loss.epsilon), (0.03, 0.75, 0.5));
        assert_eq!(cfg.dataset.biased_mnist.as_ref().unwrap().subset_size, 5000);
        let (a, t) = train_run(&cfg);
        fair.push(a);
        slowest = slowest.max(t);
        let (a, t) = train_run(&mnist_preset("biased-mnist-0.995-control", seed, &dir));
        control.push(a);
        slowest = slowest.max(t);
    }
    let every_seed = fair.iter().zip(&control).all(|(f, c)| f > c);
    let pass = every_seed && slowest <= MNIST_RUN_LIMIT;
    verdict(
        8,
        pass,
        &format!("fairkl {}; control {}; slowest run {:.1?}", pct(&fair), pct(&control), slowest),
    );
}

#[test]
fn criterion_09_full_kl_vs_mean_only() {
    let _g = serial();
    let (kl, _) = blobs_seeds("blobs-rho99-fairkl");
    let (mean_only, _) = blobs_seeds("blobs-rho99-meanonly");
    verdict(9, mean(&kl) >= mean(&mean_only), &format!("kl {}; mean_only {}", pct(&kl), pct(&mean_only)));
}

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let mut same = Vec::new();
    for name in ["blobs-rho99-fairkl", "blobs-rho99-supcon"] {
        let cfg = preset(name, 7);
        let read = || {
            let dir = tempfile::tempdir().unwrap();
            experiment::run_train(&cfg, dir.path()).unwrap();
            std::fs::read(dir.path().join("metrics.csv")).unwrap()
        };
        let (a, b) = (read(), read());
        same.push((name, !a.is_empty() && a == b));
    }
    let pass = same.iter().all(|s| s.1);
    let detail: Vec<String> = same.iter().map(|(n, s)| format!("{n} identical={s}")).collect();
    verdict(10, pass, &detail.join("; "));
}
