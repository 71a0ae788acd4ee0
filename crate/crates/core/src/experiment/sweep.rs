use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::Result;

use super::config::ExperimentConfig;
use super::run::{run_train, RunSummary};

pub const SWEEP_HEADER: &str = "epsilon,alpha,lambda,rho,runs,failed,acc_overall_mean,acc_overall_std,\
acc_aligned_mean,acc_aligned_std,acc_conflicting_mean,acc_conflicting_std";

/// One `(ε, α, λ, ρ)` combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub epsilon: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub rho: f64,
}

impl GridPoint {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        cfg.loss.epsilon = self.epsilon;
        cfg.objective.alpha = self.alpha;
        cfg.objective.lambda = self.lambda;
        cfg.set_rho(self.rho);
    }
}

/// Mean ± sample standard deviation over the seeds that finished.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: GridPoint,
    pub runs: usize,
    pub failed: usize,
    /// `(mean, std)` for overall, aligned and conflicting accuracy.
    pub overall: (f64, f64),
    pub aligned: (f64, f64),
    pub conflicting: (f64, f64),
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let p = &self.point;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            p.epsilon,
            p.alpha,
            p.lambda,
            p.rho,
            self.runs,
            self.failed,
            self.overall.0,
            self.overall.1,
            self.aligned.0,
            self.aligned.1,
            self.conflicting.0,
            self.conflicting.1
        )
    }
}

/// Cartesian product of the sweep lists, ε varying slowest.
pub fn grid(cfg: &ExperimentConfig) -> Vec<GridPoint> {
    let or_base = |v: &[f64], base: f64| if v.is_empty() { vec![base] } else { v.to_vec() };
    let s = &cfg.sweep;
    let mut out = Vec::new();
    for &epsilon in &or_base(&s.epsilon, cfg.loss.epsilon) {
        for &alpha in &or_base(&s.alpha, cfg.objective.alpha) {
            for &lambda in &or_base(&s.lambda, cfg.objective.lambda) {
                for &rho in &or_base(&s.rho, cfg.rho()) {
                    out.push(GridPoint { epsilon, alpha, lambda, rho });
                }
            }
        }
    }
    out
}

pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

struct Job {
    point: usize,
    cfg: ExperimentConfig,
    dir: PathBuf,
}

/// Trains every grid point for every seed on a pool of `sweep.workers`
/// threads and writes `sweep.csv`. A failed run is logged and counted
/// against its point; the sweep carries on.
pub fn run_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let points = grid(cfg);
    let mut jobs = Vec::new();
    for (k, p) in points.iter().enumerate() {
        for &seed in &cfg.sweep.seeds {
            let mut c = cfg.clone();
            p.apply(&mut c);
            c.set_seed(seed);
            let run_dir = dir.join(format!("point{k:03}_seed{seed}"));
            c.output_dir = run_dir.clone();
            c.validate()?;
            jobs.push(Job { point: k, cfg: c, dir: run_dir });
        }
    }
    fs::create_dir_all(dir)?;
    let results: Mutex<Vec<Option<std::result::Result<RunSummary, String>>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers = cfg.sweep.workers.min(jobs.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = run_train(&job.cfg, &job.dir).map_err(|e| {
                    log::warn!("sweep run {} failed: {e}", job.dir.display());
                    e.to_string()
                });
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("workers joined");
    let mut rows = Vec::with_capacity(points.len());
    for (k, p) in points.iter().enumerate() {
        let (mut o, mut a, mut c, mut failed) = (Vec::new(), Vec::new(), Vec::new(), 0);
        for (job, r) in jobs.iter().zip(&results) {
            if job.point != k {
                continue;
            }
            match r {
                Some(Ok(s)) => {
                    let acc = s.accuracy();
                    o.push(acc.overall);
                    a.push(acc.aligned);
                    c.push(acc.conflicting);
                }
                _ => failed += 1,
            }
        }
        rows.push(SweepRow {
            point: *p,
            runs: o.len() + failed,
            failed,
            overall: mean_std(&o),
            aligned: mean_std(&a),
            conflicting: mean_std(&c),
        });
    }
    let mut w = std::io::BufWriter::new(fs::File::create(dir.join("sweep.csv"))?);
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in &rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    w.flush()?;
    Ok(rows)
}
