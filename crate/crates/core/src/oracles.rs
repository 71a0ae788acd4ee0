//! Brute-force oracles for the loss identities, the Gaussian KL, the
//! estimator ordering and every analytic gradient.
//!
//! The closed forms here are written out directly with `exp` and `ln` on
//! plain `f64` slices and share no code with [`crate::losses`] or
//! [`crate::fairkl`].

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::fairkl::{self, BiasMode, PenaltyKind, RegularizerConfig};
use crate::geometry::{build_similarity_view, BiasInfo};
use crate::gradcheck::grad_check;
use crate::losses::{self, LossConfig, LossVariant};
use crate::tensor::Tensor;

/// Temperature at which the oracles draw similarities.
pub const ORACLE_TEMPERATURE: f64 = 0.1;
pub const IDENTITY_TOL: f64 = 1e-9;
pub const REDUCTION_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-4;
/// Monte-Carlo agreement bound, in standard errors.
pub const MC_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub trials: usize,
    pub max_abs_err: f64,
    /// For Monte-Carlo oracles this holds the worst deviation in standard
    /// errors.
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const REPORT_HEADER: &str = "name,trials,max_abs_err,max_rel_err,pass";

impl OracleReport {
    fn absolute(name: &str, trials: usize, errs: impl IntoIterator<Item = (f64, f64)>, tolerance: f64) -> Self {
        let (mut abs, mut rel) = (0.0f64, 0.0f64);
        let mut finite = true;
        for (err, scale) in errs {
            finite &= err.is_finite();
            abs = abs.max(err);
            rel = rel.max(err / scale.abs().max(f64::MIN_POSITIVE));
        }
        Self {
            name: name.to_string(),
            trials,
            max_abs_err: abs,
            max_rel_err: rel,
            tolerance,
            pass: finite && abs <= tolerance,
        }
    }

    pub fn csv_line(&self) -> String {
        format!("{},{},{:e},{:e},{}", self.name, self.trials, self.max_abs_err, self.max_rel_err, self.pass)
    }
}

pub fn write_report(path: &Path, reports: &[OracleReport]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{REPORT_HEADER}")?;
    for r in reports {
        writeln!(w, "{}", r.csv_line())?;
    }
    w.flush()?;
    Ok(())
}

pub type KlFn = fn(f64, f64, f64, f64) -> f64;

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub identity_trials: usize,
    pub reduction_batches: usize,
    pub ordering_trials: usize,
    pub monotone_trials: usize,
    pub grad_batches: usize,
    pub mc_draws: usize,
    pub mc_samples: usize,
    pub seed: u64,
    /// The Gaussian KL under test.
    pub kl: KlFn,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            identity_trials: 100,
            reduction_batches: 50,
            ordering_trials: 10_000,
            monotone_trials: 1_000,
            grad_batches: 20,
            mc_draws: 50,
            mc_samples: 1_000_000,
            seed: 0,
            kl: fairkl::gaussian_kl,
        }
    }
}

/// Every oracle, in a fixed order.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<OracleReport>> {
    let mut out = identity_suite(opts.identity_trials, opts.seed);
    out.extend(implementation_oracles(opts.identity_trials, opts.seed)?);
    out.extend(reduction_oracles(opts.reduction_batches, opts.seed)?);
    out.push(ordering_oracle(opts.ordering_trials, opts.seed)?);
    out.push(epsilon_monotonicity_oracle(opts.monotone_trials, opts.seed)?);
    out.extend(smoothmax_oracles(opts.identity_trials, opts.seed));
    out.extend(kl_oracles(opts.kl, opts.mc_draws, opts.mc_samples, opts.seed));
    out.extend(gradient_oracles(opts.grad_batches, opts.seed)?);
    out.push(fairkl_descent_oracle(opts.seed)?);
    Ok(out)
}

fn lse(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn sum_exp(x: &[f64]) -> f64 {
    x.iter().map(|v| v.exp()).sum()
}

/// Positives, negatives and a margin at the similarity scale `1/τ`.
#[derive(Debug, Clone)]
struct Draw {
    pos: Vec<f64>,
    neg: Vec<f64>,
    eps: f64,
}

fn draw(rng: &mut ChaCha8Rng, max_p: usize) -> Draw {
    let r = 1.0 / ORACLE_TEMPERATURE;
    let p = rng.gen_range(1..=max_p);
    let n = rng.gen_range(1..=10);
    Draw {
        pos: (0..p).map(|_| rng.gen_range(-r..=r)).collect(),
        neg: (0..n).map(|_| rng.gen_range(-r..=r)).collect(),
        eps: rng.gen_range(0.0..=2.0 * r),
    }
}

// Closed forms, one positive or summed per positive.

fn closed_eps_infonce(sp: f64, neg: &[f64], eps: f64) -> f64 {
    -(sp.exp() / ((sp - eps).exp() + sum_exp(neg))).ln()
}

fn closed_multi_a(pos: &[f64], neg: &[f64], eps: f64) -> f64 {
    let s: f64 = pos.iter().sum();
    let loo: f64 = pos.iter().map(|si| (s - si).exp()).sum();
    -(s.exp() / ((s - eps).exp() + sum_exp(neg) * loo)).ln()
}

fn closed_multi_b(pos: &[f64], neg: &[f64], eps: f64) -> f64 {
    let s: f64 = pos.iter().sum();
    let loo: f64 = pos.iter().map(|si| (s - si).exp()).sum();
    neg.iter().map(|sj| -(s.exp() / ((s - eps).exp() + sj.exp() * loo)).ln()).sum()
}

fn closed_multi_c(pos: &[f64], neg: &[f64], eps: f64) -> f64 {
    pos.iter().map(|&si| closed_eps_infonce(si, neg, eps)).sum()
}

fn closed_multi_d(pos: &[f64], neg: &[f64], eps: f64) -> f64 {
    pos.iter()
        .flat_map(|&si| neg.iter().map(move |&sj| -(si.exp() / ((si - eps).exp() + sj.exp())).ln()))
        .sum()
}

fn closed_supcon(pos: &[f64], neg: &[f64], eps: f64) -> f64 {
    let denom: f64 = pos.iter().map(|t| (t - eps).exp()).sum::<f64>() + sum_exp(neg);
    -pos.iter().map(|si| (si.exp() / denom).ln()).sum::<f64>() / pos.len() as f64
}

fn closed_sup_in(pos: &[f64], neg: &[f64]) -> f64 {
    let denom = sum_exp(pos) + sum_exp(neg);
    -pos.iter().map(|si| si.exp() / denom).sum::<f64>().ln()
}

// LSE forms of the margin constraints.

fn lse_eps_infonce(sp: f64, neg: &[f64], eps: f64) -> f64 {
    let mut terms = vec![-eps];
    terms.extend(neg.iter().map(|sj| sj - sp));
    lse(&terms)
}

fn lse_multi_a(pos: &[f64], neg: &[f64], eps: f64) -> f64 {
    let mut terms = vec![-eps];
    for si in pos {
        terms.extend(neg.iter().map(|sj| sj - si));
    }
    lse(&terms)
}

fn lse_multi_b(pos: &[f64], neg: &[f64], eps: f64) -> f64 {
    neg.iter()
        .map(|sj| {
            let mut terms = vec![-eps];
            terms.extend(pos.iter().map(|si| sj - si));
            lse(&terms)
        })
        .sum()
}

fn lse_multi_c(pos: &[f64], neg: &[f64], eps: f64) -> f64 {
    pos.iter().map(|&si| lse_eps_infonce(si, neg, eps)).sum()
}

fn lse_multi_d(pos: &[f64], neg: &[f64], eps: f64) -> f64 {
    pos.iter()
        .flat_map(|&si| neg.iter().map(move |&sj| lse(&[-eps, sj - si])))
        .sum()
}

fn lse_supcon(pos: &[f64], neg: &[f64], eps: f64) -> f64 {
    let p = pos.len();
    (0..p)
        .map(|i| {
            let si = pos[i];
            let mut terms = vec![0.0];
            terms.extend(neg.iter().map(|sj| sj - si + eps));
            terms.extend((0..p).filter(|&t| t != i).map(|t| pos[t] - si));
            lse(&terms)
        })
        .sum::<f64>()
        / p as f64
}

fn lse_sup_in(pos: &[f64], neg: &[f64]) -> f64 {
    lse(&[0.0, lse(neg) - lse(pos)])
}

/// Successive rewrites of the all-pairs margin LSE, each of which must
/// equal the first.
fn multi_a_chain(pos: &[f64], neg: &[f64], eps: f64) -> Vec<f64> {
    let p = pos.len() as f64;
    let sn = sum_exp(neg);
    let prod_all: f64 = pos.iter().map(|s| s.exp()).product();
    let prod_loo = |i: usize| pos.iter().enumerate().filter(|&(t, _)| t != i).map(|(_, s)| s.exp()).product::<f64>();
    vec![
        ((-eps).exp() + pos.iter().map(|si| sn / si.exp()).sum::<f64>()).ln(),
        pos.iter().map(|si| (-eps).exp() / p + sn / si.exp()).sum::<f64>().ln(),
        pos.iter().map(|si| ((si - eps).exp() + p * sn) / (p * si.exp())).sum::<f64>().ln(),
        pos.iter().map(|si| ((si - eps).exp() / p + sn) / si.exp()).sum::<f64>().ln(),
        ((0..pos.len())
            .map(|i| (pos[i] - eps).exp() / p * prod_loo(i) + sn * prod_loo(i))
            .sum::<f64>()
            / prod_all)
            .ln(),
        (((-eps).exp() * prod_all + sn * (0..pos.len()).map(prod_loo).sum::<f64>()) / prod_all).ln(),
        closed_multi_a(pos, neg, eps),
    ]
}

/// The six LSE-versus-closed-form derivations on random inputs.
pub fn identity_suite(trials: usize, seed: u64) -> Vec<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Draw> = (0..trials).map(|_| draw(&mut rng, 5)).collect();
    let pair = |a: f64, b: f64| ((a - b).abs(), b);
    vec![
        OracleReport::absolute(
            "identity_eps_infonce",
            trials,
            draws.iter().map(|d| pair(lse_eps_infonce(d.pos[0], &d.neg, d.eps), closed_eps_infonce(d.pos[0], &d.neg, d.eps))),
            IDENTITY_TOL,
        ),
        OracleReport::absolute(
            "identity_multi_positive",
            trials,
            draws.iter().map(|d| {
                let (p, n, e) = (&d.pos, &d.neg, d.eps);
                [
                    pair(lse_multi_a(p, n, e), closed_multi_a(p, n, e)),
                    pair(lse_multi_b(p, n, e), closed_multi_b(p, n, e)),
                    pair(lse_multi_c(p, n, e), closed_multi_c(p, n, e)),
                    pair(lse_multi_d(p, n, e), closed_multi_d(p, n, e)),
                ]
                .into_iter()
                .fold((0.0, 1.0), |acc, x| if x.0 > acc.0 { x } else { acc })
            }),
            IDENTITY_TOL,
        ),
        OracleReport::absolute(
            "identity_eps_supinfonce",
            trials,
            draws.iter().map(|d| {
                let lhs: f64 = d
                    .pos
                    .iter()
                    .map(|si| ((-d.eps).exp() + d.neg.iter().map(|sj| (sj - si).exp()).sum::<f64>()).ln())
                    .sum();
                pair(lhs, closed_multi_c(&d.pos, &d.neg, d.eps))
            }),
            IDENTITY_TOL,
        ),
        OracleReport::absolute(
            "identity_eps_supcon_offset",
            trials,
            draws
                .iter()
                .map(|d| pair(lse_supcon(&d.pos, &d.neg, d.eps) - closed_supcon(&d.pos, &d.neg, d.eps), d.eps)),
            IDENTITY_TOL,
        ),
        OracleReport::absolute(
            "identity_l_sup_in",
            trials,
            draws.iter().map(|d| pair(lse_sup_in(&d.pos, &d.neg), closed_sup_in(&d.pos, &d.neg))),
            IDENTITY_TOL,
        ),
        OracleReport::absolute(
            "identity_multi_positive_a_steps",
            trials,
            draws.iter().map(|d| {
                let chain = multi_a_chain(&d.pos, &d.neg, d.eps);
                let first = lse_multi_a(&d.pos, &d.neg, d.eps);
                (chain.iter().map(|v| (v - first).abs()).fold(0.0, f64::max), first)
            }),
            IDENTITY_TOL,
        ),
    ]
}

/// A random batch of unit rows with `classes` balanced labels.
fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let mut data = Vec::with_capacity(b * d);
    for _ in 0..b {
        let r: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(r.iter().map(|v| v / n));
    }
    let labels = (0..b).map(|i| i % classes).collect();
    (Tensor::matrix(b, d, data).expect("shape"), labels)
}

/// `⟨e_a, e_i⟩ / τ` split into positives and negatives of anchor `a`.
fn direct_sims(e: &Tensor, labels: &[usize], a: usize, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..labels.len() {
        if i == a {
            continue;
        }
        let s = e.row(a).iter().zip(e.row(i)).map(|(x, y)| x * y).sum::<f64>() / tau;
        if labels[i] == labels[a] {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    (pos, neg)
}

fn library_loss(e: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let ev = g.constant(e.clone())?;
    let view = build_similarity_view(&mut g, ev, labels, &BiasInfo::Discrete(vec![0; labels.len()]), cfg.temperature)?;
    let out = losses::contrastive_loss(&mut g, &view, cfg)?;
    Ok(g.scalar(out.value))
}

/// Library batch losses against the closed forms, anchor by anchor.
pub fn implementation_oracles(trials: usize, seed: u64) -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1);
    let tau = ORACLE_TEMPERATURE;
    let mut errs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); LossVariant::ALL.len()];
    for _ in 0..trials {
        let (e, labels) = random_batch(&mut rng, 12, 6, 3);
        let eps = rng.gen_range(0.0..=2.0 / tau);
        let per_anchor: Vec<(Vec<f64>, Vec<f64>)> = (0..12).map(|a| direct_sims(&e, &labels, a, tau)).collect();
        for (k, variant) in LossVariant::ALL.into_iter().enumerate() {
            let cfg = LossConfig { variant, epsilon: eps, temperature: tau };
            let got = library_loss(&e, &labels, &cfg)?;
            let want = per_anchor
                .iter()
                .map(|(p, n)| match variant {
                    LossVariant::EpsInfonce => p.iter().map(|&s| closed_eps_infonce(s, n, eps)).sum::<f64>() / p.len() as f64,
                    LossVariant::EpsSupinfonceA => closed_multi_a(p, n, eps),
                    LossVariant::EpsSupinfonceB => closed_multi_b(p, n, eps),
                    LossVariant::EpsSupinfonceC => closed_multi_c(p, n, eps),
                    LossVariant::EpsSupinfonceD => closed_multi_d(p, n, eps),
                    LossVariant::EpsSupcon => closed_supcon(p, n, eps),
                    LossVariant::LSupIn => closed_sup_in(p, n),
                })
                .sum::<f64>()
                / 12.0;
            errs[k].push(((got - want).abs(), want));
        }
    }
    Ok(LossVariant::ALL
        .into_iter()
        .zip(errs)
        .map(|(v, e)| OracleReport::absolute(&format!("impl_{}", v.as_str()), trials, e, IDENTITY_TOL))
        .collect())
}

/// ε = 0 reductions to textbook InfoNCE and SupCon `L_out`, computed
/// straight from the embeddings.
pub fn reduction_oracles(batches: usize, seed: u64) -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2);
    let tau = ORACLE_TEMPERATURE;
    let (mut info, mut supcon) = (Vec::new(), Vec::new());
    for _ in 0..batches {
        let b = rng.gen_range(6..=16);
        let classes = rng.gen_range(2..=3);
        let (e, labels) = random_batch(&mut rng, b, 8, classes);
        let mut want_info = 0.0;
        let mut want_supcon = 0.0;
        for a in 0..b {
            let (pos, neg) = direct_sims(&e, &labels, a, tau);
            want_info += pos
                .iter()
                .map(|&sp| -(sp.exp() / (sp.exp() + sum_exp(&neg))).ln())
                .sum::<f64>()
                / pos.len() as f64;
            // L_out: every other sample in the denominator.
            let denom = sum_exp(&pos) + sum_exp(&neg);
            want_supcon += -pos.iter().map(|sp| (sp.exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
        }
        want_info /= b as f64;
        want_supcon /= b as f64;
        let cfg = |variant| LossConfig { variant, epsilon: 0.0, temperature: tau };
        let got_info = library_loss(&e, &labels, &cfg(LossVariant::EpsInfonce))?;
        let got_supcon = library_loss(&e, &labels, &cfg(LossVariant::EpsSupcon))?;
        info.push(((got_info - want_info).abs(), want_info));
        supcon.push(((got_supcon - want_supcon).abs(), want_supcon));
    }
    Ok(vec![
        OracleReport::absolute("reduction_eps_infonce_to_infonce", batches, info, REDUCTION_TOL),
        OracleReport::absolute("reduction_eps_supcon_to_supcon_out", batches, supcon, REDUCTION_TOL),
    ])
}

/// InfoNCE ≤ InfoL1O on random inputs; the error column is the largest
/// violation.
pub fn ordering_oracle(trials: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3);
    let mut errs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let d = draw(&mut rng, 1);
        let (infonce, infol1o) = losses::estimator_ordering_check(d.pos[0], &d.neg)?;
        errs.push(((infonce - infol1o).max(0.0), infol1o));
    }
    Ok(OracleReport::absolute("ordering_infonce_le_infol1o", trials, errs, 0.0))
}

/// ε-InfoNCE must not increase along a grid of margins over `[0, 2/τ]`.
pub fn epsilon_monotonicity_oracle(trials: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4);
    let top = 2.0 / ORACLE_TEMPERATURE;
    let mut errs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let d = draw(&mut rng, 1);
        let mut prev = f64::INFINITY;
        let mut worst = 0.0f64;
        for k in 0..=40 {
            let v = losses::eps_infonce_value(d.pos[0], &d.neg, top * k as f64 / 40.0)?;
            worst = worst.max(v - prev);
            prev = v;
        }
        errs.push((worst, prev));
    }
    Ok(OracleReport::absolute("eps_infonce_monotone_in_eps", trials, errs, 0.0))
}

/// `(max, LSE, LSE − max)`.
pub fn smoothmax_gap(x: &[f64]) -> (f64, f64, f64) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let l = lse(x);
    (m, l, l - m)
}

/// Gap bounds `0 ≤ gap ≤ log n` on random vectors, and the gap shrinking
/// below 1e-3 once the top entry leads by at least 10.
pub fn smoothmax_oracles(trials: usize, seed: u64) -> Vec<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5);
    let (mut bounds, mut spread) = (Vec::new(), Vec::new());
    for _ in 0..trials {
        let n = rng.gen_range(1..=20);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let (_, _, gap) = smoothmax_gap(&x);
        let over = (-gap).max(gap - (n as f64).ln()).max(0.0);
        bounds.push((over, gap));
        let top = rng.gen_range(-5.0..5.0);
        let mut y: Vec<f64> = (0..n).map(|_| top - rng.gen_range(10.0..20.0)).collect();
        y.push(top);
        let (_, _, gap) = smoothmax_gap(&y);
        spread.push(((gap - 1e-3).max(0.0), gap));
    }
    vec![
        OracleReport::absolute("smoothmax_gap_bounds", trials, bounds, 0.0),
        OracleReport::absolute("smoothmax_gap_spread_10", trials, spread, 0.0),
    ]
}

/// Antithetic Monte-Carlo estimate of `E_p[log p − log q]` with its
/// standard error.
pub fn mc_kl_oracle(mu_p: f64, var_p: f64, mu_q: f64, var_q: f64, n_samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sp, sq) = (var_p.sqrt(), var_q.sqrt());
    let log_ratio = |x: f64| {
        let zp = (x - mu_p) / sp;
        let zq = (x - mu_q) / sq;
        -0.5 * zp * zp + 0.5 * zq * zq - (sp / sq).ln()
    };
    let pairs = (n_samples / 2).max(1);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..pairs {
        let z: f64 = rng.sample(StandardNormal);
        let v = 0.5 * (log_ratio(mu_p + sp * z) + log_ratio(mu_p - sp * z));
        sum += v;
        sum_sq += v * v;
    }
    let n = pairs as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo agreement on random parameters, plus `KL(p‖p) = 0` and
/// Jeffreys symmetry, both exact.
pub fn kl_oracles(kl: KlFn, draws: usize, samples: usize, seed: u64) -> Vec<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6);
    let params: Vec<[f64; 4]> = (0..draws)
        .map(|_| {
            [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.2..3.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.2..3.0),
            ]
        })
        .collect();
    let (mut worst_abs, mut worst_z) = (0.0f64, 0.0f64);
    for (k, &[mp, vp, mq, vq]) in params.iter().enumerate() {
        let (est, se) = mc_kl_oracle(mp, vp, mq, vq, samples, seed.wrapping_add(k as u64));
        let diff = (kl(mp, vp, mq, vq) - est).abs();
        worst_abs = worst_abs.max(diff);
        worst_z = worst_z.max(if se > 0.0 { diff / se } else if diff == 0.0 { 0.0 } else { f64::INFINITY });
    }
    let mc = OracleReport {
        name: "gaussian_kl_monte_carlo".into(),
        trials: draws,
        max_abs_err: worst_abs,
        max_rel_err: worst_z,
        tolerance: MC_SIGMAS,
        pass: worst_z.is_finite() && worst_z <= MC_SIGMAS,
    };
    let self_zero = OracleReport::absolute(
        "gaussian_kl_self_zero",
        draws,
        params.iter().map(|&[m, v, _, _]| (kl(m, v, m, v).abs(), 1.0)),
        0.0,
    );
    let jeffreys = |mp, vp, mq, vq| kl(mp, vp, mq, vq) + kl(mq, vq, mp, vp);
    let symmetric = OracleReport::absolute(
        "jeffreys_symmetry",
        draws,
        params
            .iter()
            .map(|&[mp, vp, mq, vq]| ((jeffreys(mp, vp, mq, vq) - jeffreys(mq, vq, mp, vp)).abs(), jeffreys(mp, vp, mq, vq))),
        0.0,
    );
    vec![mc, self_zero, symmetric]
}

/// Central-difference checks of every loss and every FairKL kind in both
/// bias modes, through the row normalization, at `τ = 0.1`.
pub fn gradient_oracles(batches: usize, seed: u64) -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7);
    let tau = ORACLE_TEMPERATURE;
    let b = 12;
    let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
    let fixtures: Vec<(Tensor, Vec<usize>, Tensor)> = (0..batches)
        .map(|_| {
            let raw: Vec<f64> = (0..b * 4).map(|_| rng.sample(StandardNormal)).collect();
            let bias: Vec<usize> = (0..b).map(|i| (i / 2) % 2).collect();
            let mut scores = vec![0.0; b * b];
            for i in 0..b {
                for j in i..b {
                    let s = rng.gen_range(0.0..1.0);
                    scores[i * b + j] = s;
                    scores[j * b + i] = s;
                }
            }
            (Tensor::matrix(b, 4, raw).expect("shape"), bias, Tensor::matrix(b, b, scores).expect("shape"))
        })
        .collect();
    let mut out = Vec::new();
    for variant in LossVariant::ALL {
        let cfg = LossConfig { variant, epsilon: 0.5, temperature: tau };
        let mut errs = Vec::new();
        for (raw, _, _) in &fixtures {
            let r = grad_check(
                |g, x| {
                    let e = g.l2_normalize_rows(x)?;
                    let view = build_similarity_view(g, e, &labels, &BiasInfo::Discrete(vec![0; b]), tau)?;
                    Ok(losses::contrastive_loss(g, &view, &cfg)?.value)
                },
                raw,
                1e-6,
            )?;
            errs.push((r.max_rel_error, 1.0));
        }
        out.push(OracleReport::absolute(&format!("grad_{}", variant.as_str()), batches, errs, GRAD_TOL));
    }
    for mode in [BiasMode::Discrete, BiasMode::Continuous] {
        for kind in [PenaltyKind::MeanOnly, PenaltyKind::Kl, PenaltyKind::Jeffreys, PenaltyKind::EndLinear] {
            let cfg = RegularizerConfig { kind, bias_mode: mode, ..Default::default() };
            let mut errs = Vec::new();
            for (raw, bias, scores) in &fixtures {
                let info = match mode {
                    BiasMode::Discrete => BiasInfo::Discrete(bias.clone()),
                    BiasMode::Continuous => BiasInfo::Continuous(scores.clone()),
                };
                let r = grad_check(
                    |g, x| {
                        let e = g.l2_normalize_rows(x)?;
                        let view = build_similarity_view(g, e, &labels, &info, tau)?;
                        Ok(fairkl::fairkl_penalty(g, &view, &cfg)?.value)
                    },
                    raw,
                    1e-6,
                )?;
                errs.push((r.max_rel_error, 1.0));
            }
            let name = format!("grad_fairkl_{}_{}", kind_name(kind), mode_name(mode));
            out.push(OracleReport::absolute(&name, batches, errs, GRAD_TOL));
        }
    }
    Ok(out)
}

pub const DESCENT_STEPS: usize = 2000;
pub const DESCENT_TOL: f64 = 1e-3;
pub const DESCENT_LR: f64 = 1.0;
pub const DESCENT_SPREAD: f64 = 0.25;

/// Two classes and two bias values with `per` points per cell. Class owns
/// axis 0 and bias axis 1, so for every anchor
/// `d+b < d+b' <= d-b - margin < d-b' - margin` on squared distances.
pub fn ordered_construction(per: usize, dim: usize, spread: f64, seed: u64) -> (Tensor, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut data, mut labels, mut bias) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..2 {
        for b in 0..2 {
            for _ in 0..per {
                let mut r = vec![0.0; dim.max(3)];
                r[0] = if c == 0 { 1.0 } else { -1.0 };
                r[1] = if b == 0 { 0.6 } else { -0.6 };
                for v in &mut r[2..] {
                    *v = rng.gen_range(-spread..spread);
                }
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                data.extend(r.iter().map(|v| v / n));
                labels.push(c);
                bias.push(b);
            }
        }
    }
    (Tensor::matrix(4 * per, dim.max(3), data).expect("shape"), labels, bias)
}

/// Whether every anchor of `e` satisfies the bias ordering with `margin`.
pub fn is_bias_ordered(e: &Tensor, labels: &[usize], bias: &[usize], margin: f64) -> bool {
    let d = |a: usize, i: usize| e.row(a).iter().zip(e.row(i)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    (0..labels.len()).all(|a| {
        let group = |pos: bool, same: bool| -> Vec<f64> {
            (0..labels.len())
                .filter(|&i| i != a && (labels[i] == labels[a]) == pos && (bias[i] == bias[a]) == same)
                .map(|i| d(a, i))
                .collect()
        };
        let max = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max);
        let min = |v: &[f64]| v.iter().copied().fold(f64::MAX, f64::min);
        let (pa, pc, na, nc) = (group(true, true), group(true, false), group(false, true), group(false, false));
        max(&pa) < min(&pc) && max(&pc) <= min(&na) - margin && max(&na) < min(&nc)
    })
}

/// Result of plain gradient descent on a penalty over free coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentTrace {
    pub ordered_at_start: bool,
    pub steps: usize,
    pub initial_penalty: f64,
    pub final_penalty: f64,
    /// Worst `|mean aligned - mean conflicting|` over anchors, as
    /// `[positives, negatives]` for anchors of bias value 0, then of value 1.
    pub gaps: [f64; 4],
}

fn mean_gaps(g: &mut Graph, view: &crate::geometry::SimilarityView, bias: &[usize]) -> Result<[f64; 4]> {
    let mut gaps = [0.0f64; 4];
    for (a, &b) in bias.iter().enumerate() {
        let m = fairkl::group_moments(g, view, a)?;
        let pairs = [(m.pos_aligned, m.pos_conflicting), (m.neg_aligned, m.neg_conflicting)];
        for (k, (p, q)) in pairs.into_iter().enumerate() {
            if let (Some(p), Some(q)) = (p, q) {
                let slot = 2 * b.min(1) + k;
                gaps[slot] = gaps[slot].max((p.mean - q.mean).abs());
            }
        }
    }
    Ok(gaps)
}

/// Descends the penalty from [`ordered_construction`] through the row
/// normalization, stopping early once every mean gap is below [`DESCENT_TOL`].
pub fn fairkl_descent(cfg: &RegularizerConfig, spread: f64, max_steps: usize, lr: f64, seed: u64) -> Result<DescentTrace> {
    let (mut x, labels, bias) = ordered_construction(4, 8, spread, seed);
    let ordered_at_start = is_bias_ordered(&x, &labels, &bias, 0.1);
    let info = BiasInfo::Discrete(bias.clone());
    let mut initial_penalty = f64::NAN;
    let mut step = 0;
    loop {
        let mut g = Graph::new();
        let p = g.param(x.clone())?;
        let e = g.l2_normalize_rows(p)?;
        let view = build_similarity_view(&mut g, e, &labels, &info, ORACLE_TEMPERATURE)?;
        let pen = fairkl::fairkl_penalty(&mut g, &view, cfg)?;
        let value = g.scalar(pen.value);
        if step == 0 {
            initial_penalty = value;
        }
        let gaps = mean_gaps(&mut g, &view, &bias)?;
        if step == max_steps || gaps.iter().all(|&v| v < DESCENT_TOL) {
            return Ok(DescentTrace { ordered_at_start, steps: step, initial_penalty, final_penalty: value, gaps });
        }
        let grads = g.backward(pen.value)?;
        if let Some(gr) = grads.get(p) {
            for (v, d) in x.data_mut().iter_mut().zip(gr.data()) {
                *v -= lr * d;
            }
        }
        step += 1;
    }
}

/// The descent smoke check on the mean-only penalty as a report row; the
/// error column is the worst of the four gaps, and an unordered start fails
/// the row.
pub fn fairkl_descent_oracle(seed: u64) -> Result<OracleReport> {
    let cfg = RegularizerConfig { kind: PenaltyKind::MeanOnly, ..Default::default() };
    let t = fairkl_descent(&cfg, DESCENT_SPREAD, DESCENT_STEPS, DESCENT_LR, seed)?;
    let worst = t.gaps.iter().copied().fold(0.0, f64::max);
    let mut r = OracleReport::absolute("fairkl_descent_gaps", t.steps, [(worst, 1.0)], DESCENT_TOL);
    r.pass &= t.ordered_at_start && t.final_penalty < t.initial_penalty;
    Ok(r)
}

pub fn kind_name(kind: PenaltyKind) -> &'static str {
    match kind {
        PenaltyKind::MeanOnly => "mean_only",
        PenaltyKind::Kl => "kl",
        PenaltyKind::Jeffreys => "jeffreys",
        PenaltyKind::EndLinear => "end_linear",
    }
}

fn mode_name(mode: BiasMode) -> &'static str {
    match mode {
        BiasMode::Discrete => "discrete",
        BiasMode::Continuous => "continuous",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothmax_examples() {
        let (m, _, gap) = smoothmax_gap(&[5.0, 0.0, 0.0]);
        assert_eq!(m, 5.0);
        assert!((gap - (1.0 + 2.0 * (-5.0f64).exp()).ln()).abs() < 1e-15);
        assert!((gap - 1.34e-2).abs() < 1e-4);
        for n in 1..10 {
            let (_, _, gap) = smoothmax_gap(&vec![3.3; n]);
            assert!((gap - (n as f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn mc_kl_examples() {
        let (est, se) = mc_kl_oracle(0.0, 1.0, 0.0, 1.0, 100_000, 1);
        assert!(est.abs() <= 3.0 * se + 1e-15, "{est} {se}");
        let (est, se) = mc_kl_oracle(0.0, 1.0, 1.0, 1.0, 100_000, 1);
        assert!((est - 0.5).abs() <= 3.0 * se, "{est} {se}");
    }

    #[test]
    fn identity_suite_passes() {
        for r in identity_suite(100, 9) {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn identity_suite_catches_a_wrong_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = draw(&mut rng, 4);
        // the product-instead-of-sum denominator differs from the LSE form
        let wrong: f64 = d.pos.iter().map(|si| -(si.exp() / ((si - d.eps).exp() * sum_exp(&d.neg))).ln()).sum();
        assert!((wrong - lse_multi_c(&d.pos, &d.neg, d.eps)).abs() > 1e-3);
    }

    #[test]
    fn kl_mutation_fails_monte_carlo() {
        fn flipped(mp: f64, vp: f64, mq: f64, vq: f64) -> f64 {
            -fairkl::gaussian_kl(mp, vp, mq, vq)
        }
        let r = kl_oracles(flipped, 5, 100_000, 0);
        assert!(!r[0].pass);
        let r = kl_oracles(fairkl::gaussian_kl, 5, 100_000, 0);
        assert!(r.iter().all(|r| r.pass), "{r:?}");
    }

    #[test]
    fn construction_is_ordered_and_breaking_it_is_detected() {
        let (e, labels, mut bias) = ordered_construction(4, 8, DESCENT_SPREAD, 2);
        assert!(is_bias_ordered(&e, &labels, &bias, 0.1));
        bias.swap(0, 4);
        assert!(!is_bias_ordered(&e, &labels, &bias, 0.1));
    }

    #[test]
    fn mean_only_descent_closes_the_gaps() {
        let cfg = RegularizerConfig { kind: PenaltyKind::MeanOnly, ..Default::default() };
        let t = fairkl_descent(&cfg, DESCENT_SPREAD, DESCENT_STEPS, DESCENT_LR, 1).unwrap();
        assert!(t.ordered_at_start);
        assert!(t.steps < DESCENT_STEPS);
        assert!(t.gaps.iter().all(|&g| g < DESCENT_TOL), "{t:?}");
        assert!(t.final_penalty < 1e-3 * t.initial_penalty);
        let none = fairkl_descent(&cfg, DESCENT_SPREAD, 0, DESCENT_LR, 1).unwrap();
        assert!(none.gaps.iter().all(|&g| g > 0.1), "{none:?}");
    }

    #[test]
    fn quick_suite_passes_and_reports() {
        let opts = SuiteOptions {
            identity_trials: 10,
            reduction_batches: 5,
            ordering_trials: 100,
            monotone_trials: 20,
            grad_batches: 2,
            mc_draws: 3,
            mc_samples: 20_000,
            ..Default::default()
        };
        let reports = run_suite(&opts).unwrap();
        for r in &reports {
            assert!(r.pass, "{r:?}");
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("oracle_report.csv");
        write_report(&p, &reports).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), reports.len() + 1);
        assert!(text.starts_with(REPORT_HEADER));
    }
}
