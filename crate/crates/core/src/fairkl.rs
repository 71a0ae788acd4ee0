//! FairKL: matching the distance distributions of bias-aligned and
//! bias-conflicting samples, per anchor, for positives and negatives.
//!
//! Distances are the temperature-free squared L2 distances of the
//! [`SimilarityView`]. Each of the four groups of an anchor is summarised by
//! its mean and unbiased variance; the penalty compares aligned against
//! conflicting on the positive side and on the negative side.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::SimilarityView;
use crate::losses::{contrastive_loss, LossConfig};
use crate::tensor::Tensor;

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// `(μ_b − μ_b′)²` per side.
    MeanOnly,
    /// Gaussian `KL(aligned ‖ conflicting)` per side.
    #[default]
    Kl,
    /// `KL(p‖q) + KL(q‖p)` per side.
    Jeffreys,
    /// The linear Lagrangian form `(μ₊b′ − μ₊b) + (μ₋b′ − μ₋b)`.
    EndLinear,
}

/// What to do with an anchor that has a group too small for the full kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    SkipAnchor,
    /// Use only the mean term, on every side whose two groups are nonempty.
    #[default]
    MeanOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    #[default]
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    pub kind: PenaltyKind,
    pub variance_floor: f64,
    pub fallback: Fallback,
    pub bias_mode: BiasMode,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            kind: PenaltyKind::default(),
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            fallback: Fallback::default(),
            bias_mode: BiasMode::default(),
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance_floor > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "variance_floor must be positive, got {}",
                self.variance_floor
            )));
        }
        Ok(())
    }
}

/// Mean and (when defined) variance of one group's distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moment {
    pub mean: f64,
    pub var: Option<f64>,
    /// Member count, or the total weight in continuous mode.
    pub weight: f64,
}

/// The four groups of one anchor. `None` marks an empty group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMoments {
    pub pos_aligned: Option<Moment>,
    pub pos_conflicting: Option<Moment>,
    pub neg_aligned: Option<Moment>,
    pub neg_conflicting: Option<Moment>,
}

#[derive(Debug, Clone, Copy)]
struct MomentVar {
    mean: Var,
    var: Option<Var>,
    weight: f64,
}

/// `[pos_aligned, pos_conflicting, neg_aligned, neg_conflicting]`.
type Groups = [Option<MomentVar>; 4];

fn discrete_moment(g: &mut Graph, view: &SimilarityView, anchor: usize, idx: &[usize]) -> Result<Option<MomentVar>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let n = idx.len();
    let d = g.gather(view.dists, &view.flat(anchor, idx))?;
    let mean = g.mean(d)?;
    let var = if n >= 2 {
        let m = g.expand(mean, &[n])?;
        let c = g.sub(d, m)?;
        let sq = g.square(c)?;
        let s = g.sum(sq)?;
        Some(g.scale(s, 1.0 / (n - 1) as f64)?)
    } else {
        None
    };
    Ok(Some(MomentVar {
        mean,
        var,
        weight: n as f64,
    }))
}

/// Weighted moment over one side. The mean is normalised by the side's
/// member count; the variance is centred on the weighted mean and divided by
/// the reliability-weight effective count `V1 − V2/V1`.
fn weighted_moment(g: &mut Graph, d: Var, weights: &[f64]) -> Result<Option<MomentVar>> {
    let v1: f64 = weights.iter().sum();
    if v1 <= 0.0 {
        return Ok(None);
    }
    let n = weights.len();
    let v2: f64 = weights.iter().map(|w| w * w).sum();
    let w = g.constant(Tensor::vector(weights.to_vec()))?;
    let dw = g.mul(d, w)?;
    let total = g.sum(dw)?;
    let mean = g.scale(total, 1.0 / n as f64)?;
    let divisor = v1 - v2 / v1;
    let var = if divisor > 1e-12 {
        let centre = g.scale(total, 1.0 / v1)?;
        let m = g.expand(centre, &[n])?;
        let c = g.sub(d, m)?;
        let sq = g.square(c)?;
        let wsq = g.mul(sq, w)?;
        let s = g.sum(wsq)?;
        Some(g.scale(s, 1.0 / divisor)?)
    } else {
        None
    };
    Ok(Some(MomentVar { mean, var, weight: v1 }))
}

fn continuous_side(
    g: &mut Graph,
    view: &SimilarityView,
    scores: &Tensor,
    anchor: usize,
    idx: &[usize],
) -> Result<[Option<MomentVar>; 2]> {
    if idx.is_empty() {
        return Ok([None, None]);
    }
    let d = g.gather(view.dists, &view.flat(anchor, idx))?;
    let aligned: Vec<f64> = idx.iter().map(|&i| scores.get2(anchor, i)).collect();
    if let Some(v) = aligned.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("bias score {v} outside [0, 1]")));
    }
    let conflicting: Vec<f64> = aligned.iter().map(|w| 1.0 - w).collect();
    Ok([weighted_moment(g, d, &aligned)?, weighted_moment(g, d, &conflicting)?])
}

fn group_vars(g: &mut Graph, view: &SimilarityView, anchor: usize, mode: BiasMode) -> Result<Groups> {
    let sets = &view.anchors[anchor];
    match mode {
        BiasMode::Discrete => {
            if view.bias_scores.is_some() {
                return Err(Error::InvalidArgument(
                    "discrete bias mode on a batch with continuous bias scores".into(),
                ));
            }
            Ok([
                discrete_moment(g, view, anchor, &sets.pos_aligned)?,
                discrete_moment(g, view, anchor, &sets.pos_conflicting)?,
                discrete_moment(g, view, anchor, &sets.neg_aligned)?,
                discrete_moment(g, view, anchor, &sets.neg_conflicting)?,
            ])
        }
        BiasMode::Continuous => {
            let scores = view.bias_scores.as_ref().ok_or_else(|| {
                Error::InvalidArgument("continuous bias mode needs bias scores on the batch".into())
            })?;
            let [pa, pc] = continuous_side(g, view, scores, anchor, &sets.positives)?;
            let [na, nc] = continuous_side(g, view, scores, anchor, &sets.negatives)?;
            Ok([pa, pc, na, nc])
        }
    }
}

fn to_moments(g: &Graph, groups: &Groups) -> GroupMoments {
    let m = |v: &Option<MomentVar>| {
        v.map(|m| Moment {
            mean: g.scalar(m.mean),
            var: m.var.map(|v| g.scalar(v)),
            weight: m.weight,
        })
    };
    GroupMoments {
        pos_aligned: m(&groups[0]),
        pos_conflicting: m(&groups[1]),
        neg_aligned: m(&groups[2]),
        neg_conflicting: m(&groups[3]),
    }
}

/// Moments of the four groups of `anchor` (discrete bias attributes).
pub fn group_moments(g: &mut Graph, view: &SimilarityView, anchor: usize) -> Result<GroupMoments> {
    check_anchor(view, anchor)?;
    let groups = group_vars(g, view, anchor, BiasMode::Discrete)?;
    Ok(to_moments(g, &groups))
}

/// Score-weighted moments of `anchor` (continuous bias scores).
///
/// With 0/1 scores the weighted sums equal the discrete group sums, so
/// `mean · P` here equals `mean · P_a` of [`group_moments`], where `P` is the
/// anchor's positive count (likewise for negatives), and the variances agree.
pub fn weighted_moments(g: &mut Graph, view: &SimilarityView, anchor: usize) -> Result<GroupMoments> {
    check_anchor(view, anchor)?;
    let groups = group_vars(g, view, anchor, BiasMode::Continuous)?;
    Ok(to_moments(g, &groups))
}

fn check_anchor(view: &SimilarityView, anchor: usize) -> Result<()> {
    if anchor >= view.batch_size() {
        return Err(Error::IndexOutOfBounds {
            index: anchor,
            len: view.batch_size(),
        });
    }
    Ok(())
}

/// `½[(σ²_p + (μ_p − μ_q)²)/σ²_q − log(σ²_p/σ²_q) − 1]`.
pub fn gaussian_kl(mu_p: f64, var_p: f64, mu_q: f64, var_q: f64) -> f64 {
    0.5 * ((var_p + (mu_p - mu_q).powi(2)) / var_q - (var_p / var_q).ln() - 1.0)
}

/// [`gaussian_kl`] with both variances raised to at least `floor`.
pub fn gaussian_kl_floored(mu_p: f64, var_p: f64, mu_q: f64, var_q: f64, floor: f64) -> f64 {
    gaussian_kl(mu_p, var_p.max(floor), mu_q, var_q.max(floor))
}

/// `KL(p‖q) + KL(q‖p)`.
pub fn jeffreys(mu_p: f64, var_p: f64, mu_q: f64, var_q: f64) -> f64 {
    gaussian_kl(mu_p, var_p, mu_q, var_q) + gaussian_kl(mu_q, var_q, mu_p, var_p)
}

fn kl_var(g: &mut Graph, mp: Var, vp: Var, mq: Var, vq: Var, floor: f64) -> Result<Var> {
    let vp = g.clamp_min(vp, floor)?;
    let vq = g.clamp_min(vq, floor)?;
    let diff = g.sub(mp, mq)?;
    let diff2 = g.square(diff)?;
    let num = g.add(vp, diff2)?;
    let ratio = g.div(num, vq)?;
    let vr = g.div(vp, vq)?;
    let log_ratio = g.log(vr)?;
    let t = g.sub(ratio, log_ratio)?;
    let t = g.add_scalar(t, -1.0)?;
    g.scale(t, 0.5)
}

fn mean_term(g: &mut Graph, kind: PenaltyKind, aligned: &MomentVar, conflicting: &MomentVar) -> Result<Var> {
    if kind == PenaltyKind::EndLinear {
        g.sub(conflicting.mean, aligned.mean)
    } else {
        let d = g.sub(aligned.mean, conflicting.mean)?;
        g.square(d)
    }
}

fn side_term(g: &mut Graph, cfg: &RegularizerConfig, p: &MomentVar, q: &MomentVar) -> Result<Var> {
    let floor = cfg.variance_floor;
    match cfg.kind {
        PenaltyKind::MeanOnly | PenaltyKind::EndLinear => mean_term(g, cfg.kind, p, q),
        PenaltyKind::Kl | PenaltyKind::Jeffreys => {
            let (Some(vp), Some(vq)) = (p.var, q.var) else {
                unreachable!("full kind requires variances")
            };
            let fwd = kl_var(g, p.mean, vp, q.mean, vq, floor)?;
            if cfg.kind == PenaltyKind::Kl {
                Ok(fwd)
            } else {
                let bwd = kl_var(g, q.mean, vq, p.mean, vp, floor)?;
                g.add(fwd, bwd)
            }
        }
    }
}

/// Output of [`fairkl_penalty`].
#[derive(Debug, Clone, Copy)]
pub struct PenaltyOutput {
    pub value: Var,
    /// Anchors evaluated with the full kind.
    pub full: usize,
    /// Anchors evaluated through the mean-only fallback.
    pub fallback: usize,
    /// Anchors that contributed nothing.
    pub skipped: usize,
}

impl PenaltyOutput {
    pub fn contributing(&self) -> usize {
        self.full + self.fallback
    }
}

fn full_ready(kind: PenaltyKind, groups: &Groups) -> bool {
    match kind {
        PenaltyKind::MeanOnly | PenaltyKind::EndLinear => groups.iter().all(Option::is_some),
        PenaltyKind::Kl | PenaltyKind::Jeffreys => groups.iter().all(|m| m.is_some_and(|m| m.var.is_some())),
    }
}

/// The FairKL penalty averaged over contributing anchors.
pub fn fairkl_penalty(g: &mut Graph, view: &SimilarityView, cfg: &RegularizerConfig) -> Result<PenaltyOutput> {
    cfg.validate()?;
    let mut terms = Vec::with_capacity(view.batch_size());
    let (mut full, mut fallback, mut skipped) = (0, 0, 0);
    for a in 0..view.batch_size() {
        let groups = group_vars(g, view, a, cfg.bias_mode)?;
        let [pa, pc, na, nc] = groups;
        if full_ready(cfg.kind, &groups) {
            let (pa, pc, na, nc) = (pa.unwrap(), pc.unwrap(), na.unwrap(), nc.unwrap());
            let pos = side_term(g, cfg, &pa, &pc)?;
            let neg = side_term(g, cfg, &na, &nc)?;
            terms.push(g.add(pos, neg)?);
            full += 1;
            continue;
        }
        if cfg.fallback == Fallback::SkipAnchor {
            skipped += 1;
            continue;
        }
        let mut sides = Vec::with_capacity(2);
        for (p, q) in [(pa, pc), (na, nc)] {
            if let (Some(p), Some(q)) = (p, q) {
                sides.push(mean_term(g, cfg.kind, &p, &q)?);
            }
        }
        if sides.is_empty() {
            skipped += 1;
            continue;
        }
        let stacked = g.concat(&sides)?;
        terms.push(g.sum(stacked)?);
        fallback += 1;
    }
    let value = if terms.is_empty() {
        log::warn!("FairKL: no anchor has both aligned and conflicting samples; penalty is 0");
        g.constant(Tensor::scalar(0.0))?
    } else {
        let stacked = g.concat(&terms)?;
        g.mean(stacked)?
    };
    Ok(PenaltyOutput {
        value,
        full,
        fallback,
        skipped,
    })
}

/// Output of [`combined_objective`].
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveOutput {
    pub total: Var,
    /// `α · loss`.
    pub loss: Var,
    /// `λ · penalty`; absent when `λ = 0`.
    pub reg: Option<Var>,
    pub skipped_anchors: usize,
}

/// `α · loss + λ · penalty`. With `λ = 0` the penalty is not evaluated.
pub fn combined_objective(
    g: &mut Graph,
    view: &SimilarityView,
    loss_cfg: &LossConfig,
    reg_cfg: &RegularizerConfig,
    alpha: f64,
    lambda: f64,
) -> Result<ObjectiveOutput> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let l = contrastive_loss(g, view, loss_cfg)?;
    let loss = g.scale(l.value, alpha)?;
    if lambda == 0.0 {
        return Ok(ObjectiveOutput {
            total: loss,
            loss,
            reg: None,
            skipped_anchors: l.skipped,
        });
    }
    let p = fairkl_penalty(g, view, reg_cfg)?;
    let reg = g.scale(p.value, lambda)?;
    let total = g.add(loss, reg)?;
    Ok(ObjectiveOutput {
        total,
        loss,
        reg: Some(reg),
        skipped_anchors: l.skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_similarity_view, BiasInfo, EmbeddingBatch};
    use crate::gradcheck::grad_check;
    use crate::losses::LossVariant;
    use crate::testutil::{random_matrix, random_unit_rows};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn discrete_view(g: &mut Graph, e: Tensor, labels: Vec<usize>, bias: Vec<usize>) -> SimilarityView {
        let batch = EmbeddingBatch::new(e, labels, BiasInfo::Discrete(bias), 0.1).unwrap();
        SimilarityView::from_batch(g, &batch).unwrap().1
    }

    fn brute(e: &Tensor, a: usize, idx: &[usize]) -> (f64, Option<f64>) {
        let d: Vec<f64> = idx
            .iter()
            .map(|&i| e.row(a).iter().zip(e.row(i)).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect();
        let n = d.len() as f64;
        let m = d.iter().sum::<f64>() / n;
        let v = (d.len() >= 2).then(|| d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0));
        (m, v)
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Two classes, two bias values, `per` samples per (class, bias) cell.
    /// Class and bias each own an axis, so the bias makes aligned pairs
    /// closer than conflicting ones on both sides.
    fn ordered_batch(rng: &mut ChaCha8Rng, per: usize) -> (Tensor, Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let (mut labels, mut bias) = (Vec::new(), Vec::new());
        for c in 0..2 {
            for b in 0..2 {
                for _ in 0..per {
                    let cs = if c == 0 { 1.0 } else { -1.0 };
                    let bs = if b == 0 { 0.6 } else { -0.6 };
                    let r = [cs, bs, rng.gen_range(-0.05..0.05)];
                    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    rows.push(r.iter().map(|v| v / n).collect::<Vec<_>>());
                    labels.push(c);
                    bias.push(b);
                }
            }
        }
        (Tensor::from_rows(&rows).unwrap(), labels, bias)
    }

    #[test]
    fn kl_examples() {
        assert_eq!(gaussian_kl(0.0, 1.0, 0.0, 1.0), 0.0);
        assert!(close(gaussian_kl(0.0, 1.0, 1.0, 1.0), 0.5, 1e-15));
        assert_eq!(gaussian_kl_floored(0.0, 0.0, 0.0, 0.0, 1e-6), 0.0);
    }

    #[test]
    fn equidistant_positives() {
        // anchor at the pole, positives on a ring at squared distance 0.5
        let h: f64 = 0.75;
        let r = (1.0 - h * h).sqrt();
        let rows = vec![
            vec![0.0, 0.0, 1.0],
            vec![r, 0.0, h],
            vec![-r, 0.0, h],
            vec![0.0, r, h],
            vec![0.0, -r, h],
            vec![0.0, 0.0, -1.0],
        ];
        let mut g = Graph::new();
        let view = discrete_view(&mut g, Tensor::from_rows(&rows).unwrap(), vec![0, 0, 0, 0, 0, 1], vec![0, 0, 0, 1, 1, 0]);
        let m = group_moments(&mut g, &view, 0).unwrap();
        for grp in [m.pos_aligned, m.pos_conflicting] {
            let grp = grp.unwrap();
            assert!(close(grp.mean, 0.5, 1e-12));
            assert!(close(grp.var.unwrap(), 0.0, 1e-12));
        }
        let na = m.neg_aligned.unwrap();
        assert!(na.var.is_none());
        assert!(close(na.mean, 4.0, 1e-12));
        assert!(m.neg_conflicting.is_none());
    }

    #[test]
    fn moments_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let e = random_unit_rows(&mut rng, 14, 4);
            let labels: Vec<usize> = (0..14).map(|i| i % 2).collect();
            let bias: Vec<usize> = (0..14).map(|_| rng.gen_range(0..2)).collect();
            let mut g = Graph::new();
            let view = discrete_view(&mut g, e.clone(), labels, bias);
            for a in 0..14 {
                let m = group_moments(&mut g, &view, a).unwrap();
                let s = &view.anchors[a];
                for (grp, idx) in [
                    (m.pos_aligned, &s.pos_aligned),
                    (m.pos_conflicting, &s.pos_conflicting),
                    (m.neg_aligned, &s.neg_aligned),
                    (m.neg_conflicting, &s.neg_conflicting),
                ] {
                    match grp {
                        None => assert!(idx.is_empty()),
                        Some(grp) => {
                            let (mean, var) = brute(&e, a, idx);
                            assert!(close(grp.mean, mean, 1e-12));
                            assert_eq!(grp.var.is_some(), var.is_some());
                            if let (Some(x), Some(y)) = (grp.var, var) {
                                assert!(close(x, y, 1e-12));
                            }
                            assert!(grp.var.unwrap_or(0.0) >= 0.0);
                        }
                    }
                }
            }
        }
    }

    fn continuous_view(g: &mut Graph, e: Tensor, labels: Vec<usize>, scores: Tensor) -> SimilarityView {
        let batch = EmbeddingBatch::new(e, labels, BiasInfo::Continuous(scores), 0.1).unwrap();
        SimilarityView::from_batch(g, &batch).unwrap().1
    }

    #[test]
    fn binary_scores_reproduce_discrete_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = random_unit_rows(&mut rng, 12, 3);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let bias: Vec<usize> = (0..12).map(|_| rng.gen_range(0..2)).collect();
        let scores: Vec<f64> = (0..144)
            .map(|k| if bias[k / 12] == bias[k % 12] { 1.0 } else { 0.0 })
            .collect();
        let mut g = Graph::new();
        let dv = discrete_view(&mut g, e.clone(), labels.clone(), bias);
        let cv = continuous_view(&mut g, e, labels, Tensor::matrix(12, 12, scores).unwrap());
        for a in 0..12 {
            let d = group_moments(&mut g, &dv, a).unwrap();
            let c = weighted_moments(&mut g, &cv, a).unwrap();
            let p = cv.anchors[a].positives.len() as f64;
            let n = cv.anchors[a].negatives.len() as f64;
            for (dm, cm, side) in [
                (d.pos_aligned, c.pos_aligned, p),
                (d.pos_conflicting, c.pos_conflicting, p),
                (d.neg_aligned, c.neg_aligned, n),
                (d.neg_conflicting, c.neg_conflicting, n),
            ] {
                assert_eq!(dm.is_some(), cm.is_some());
                if let (Some(dm), Some(cm)) = (dm, cm) {
                    assert!(close(cm.mean * side, dm.mean * dm.weight, 1e-12));
                    assert_eq!(cm.weight, dm.weight);
                    assert_eq!(dm.var.is_some(), cm.var.is_some());
                    if let (Some(x), Some(y)) = (dm.var, cm.var) {
                        assert!(close(x, y, 1e-12));
                    }
                }
            }
        }
    }

    #[test]
    fn half_scores_give_equal_means_and_brute_force_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = random_unit_rows(&mut rng, 10, 3);
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let mut g = Graph::new();
        let cv = continuous_view(&mut g, e.clone(), labels.clone(), Tensor::filled(&[10, 10], 0.5));
        for a in 0..10 {
            let m = weighted_moments(&mut g, &cv, a).unwrap();
            assert_eq!(m.pos_aligned.unwrap().mean, m.pos_conflicting.unwrap().mean);
            assert_eq!(m.neg_aligned.unwrap().mean, m.neg_conflicting.unwrap().mean);
        }

        let scores = Tensor::matrix(10, 10, (0..100).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let cv = continuous_view(&mut g, e.clone(), labels, scores.clone());
        for a in 0..10 {
            let m = weighted_moments(&mut g, &cv, a).unwrap();
            let p = &cv.anchors[a].positives;
            let d: Vec<f64> = p
                .iter()
                .map(|&i| e.row(a).iter().zip(e.row(i)).map(|(x, y)| (x - y) * (x - y)).sum())
                .collect();
            let w: Vec<f64> = p.iter().map(|&i| scores.get2(a, i)).collect();
            let v1: f64 = w.iter().sum();
            let v2: f64 = w.iter().map(|x| x * x).sum();
            let mean = d.iter().zip(&w).map(|(d, w)| d * w).sum::<f64>() / p.len() as f64;
            let centre = d.iter().zip(&w).map(|(d, w)| d * w).sum::<f64>() / v1;
            let var = d.iter().zip(&w).map(|(d, w)| w * (d - centre).powi(2)).sum::<f64>() / (v1 - v2 / v1);
            let pa = m.pos_aligned.unwrap();
            assert!(close(pa.mean, mean, 1e-12));
            assert!(close(pa.var.unwrap(), var, 1e-12));
        }
    }

    #[test]
    fn out_of_range_scores_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = random_unit_rows(&mut rng, 4, 3);
        let mut g = Graph::new();
        let mut view = continuous_view(&mut g, e, vec![0, 0, 1, 1], Tensor::filled(&[4, 4], 0.5));
        view.bias_scores = Some(Tensor::filled(&[4, 4], 1.5));
        assert!(weighted_moments(&mut g, &view, 0).is_err());
    }

    #[test]
    fn mode_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = random_unit_rows(&mut rng, 4, 3);
        let mut g = Graph::new();
        let view = discrete_view(&mut g, e, vec![0, 0, 1, 1], vec![0, 1, 0, 1]);
        let cfg = RegularizerConfig {
            bias_mode: BiasMode::Continuous,
            ..Default::default()
        };
        assert!(fairkl_penalty(&mut g, &view, &cfg).is_err());
    }

    #[test]
    fn identical_group_distributions_give_small_penalty() {
        // bias attribute assigned independently of the embedding
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = random_unit_rows(&mut rng, 400, 32);
        let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
        let bias: Vec<usize> = (0..400).map(|i| (i / 2) % 2).collect();
        let mut g = Graph::new();
        let view = discrete_view(&mut g, e, labels, bias);
        for kind in [PenaltyKind::MeanOnly, PenaltyKind::Kl, PenaltyKind::Jeffreys] {
            let p = fairkl_penalty(&mut g, &view, &RegularizerConfig { kind, ..Default::default() }).unwrap();
            // sampling noise with ~100 members per group is a few hundredths
            assert!(g.scalar(p.value) < 0.1, "{kind:?}: {}", g.scalar(p.value));
        }
    }

    #[test]
    fn ordered_batch_is_penalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (e, labels, bias) = ordered_batch(&mut rng, 4);
        let mut g = Graph::new();
        let view = discrete_view(&mut g, e.clone(), labels.clone(), bias.clone());
        // the construction really is ordered: d+b < d+b' <= d-b - eps < d-b' - eps
        let eps = 0.1;
        let d = g.value(view.dists).clone();
        for (a, s) in view.anchors.iter().enumerate() {
            let max = |idx: &[usize]| idx.iter().map(|&i| d.get2(a, i)).fold(f64::MIN, f64::max);
            let min = |idx: &[usize]| idx.iter().map(|&i| d.get2(a, i)).fold(f64::MAX, f64::min);
            assert!(max(&s.pos_aligned) < min(&s.pos_conflicting));
            assert!(max(&s.pos_conflicting) <= min(&s.neg_aligned) - eps);
            assert!(max(&s.neg_aligned) < min(&s.neg_conflicting));
        }
        for kind in [PenaltyKind::MeanOnly, PenaltyKind::Kl, PenaltyKind::Jeffreys] {
            let p = fairkl_penalty(&mut g, &view, &RegularizerConfig { kind, ..Default::default() }).unwrap();
            assert!(g.scalar(p.value) > 0.0);
            assert_eq!(p.full, 16);
        }
    }

    #[test]
    fn equal_means_different_spread() {
        // anchor 0 with positives at distances {1,1} (aligned) and {0.5,1.5}
        // (conflicting), negatives likewise: means match, variances do not.
        fn point(d: f64) -> Vec<f64> {
            // unit vector at squared distance d from (1,0,0)
            let c = 1.0 - d / 2.0;
            vec![c, (1.0 - c * c).sqrt(), 0.0]
        }
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            point(1.0),
            point(1.0),
            point(0.5),
            point(1.5),
            point(1.0),
            point(1.0),
            point(0.5),
            point(1.5),
        ];
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 1];
        let bias = vec![0, 0, 0, 1, 1, 0, 0, 1, 1];
        let mut g = Graph::new();
        let mut view = discrete_view(&mut g, Tensor::from_rows(&rows).unwrap(), labels, bias);
        for a in 1..9 {
            view.anchors[a] = Default::default();
        }
        let mo = fairkl_penalty(&mut g, &view, &RegularizerConfig { kind: PenaltyKind::MeanOnly, fallback: Fallback::SkipAnchor, ..Default::default() }).unwrap();
        let kl = fairkl_penalty(&mut g, &view, &RegularizerConfig { kind: PenaltyKind::Kl, fallback: Fallback::SkipAnchor, ..Default::default() }).unwrap();
        assert!(g.scalar(mo.value) < 1e-24);
        assert!(g.scalar(kl.value) > 1.0);
    }

    fn swap_bias_roles(view: &SimilarityView) -> SimilarityView {
        let mut v = view.clone();
        for s in &mut v.anchors {
            std::mem::swap(&mut s.pos_aligned, &mut s.pos_conflicting);
            std::mem::swap(&mut s.neg_aligned, &mut s.neg_conflicting);
        }
        v
    }

    #[test]
    fn only_kl_is_direction_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (e, labels, bias) = ordered_batch(&mut rng, 4);
        let mut g = Graph::new();
        let view = discrete_view(&mut g, e, labels, bias);
        let swapped = swap_bias_roles(&view);
        for kind in [PenaltyKind::MeanOnly, PenaltyKind::Jeffreys, PenaltyKind::Kl] {
            let cfg = RegularizerConfig { kind, ..Default::default() };
            let a = fairkl_penalty(&mut g, &view, &cfg).unwrap();
            let b = fairkl_penalty(&mut g, &swapped, &cfg).unwrap();
            let (a, b) = (g.scalar(a.value), g.scalar(b.value));
            if kind == PenaltyKind::Kl {
                assert!((a - b).abs() > 1e-3 * a.abs(), "{a} {b}");
            } else {
                assert!(close(a, b, 1e-12 * a.abs().max(1.0)), "{kind:?}: {a} {b}");
            }
        }
    }

    #[test]
    fn fallback_policies() {
        // anchor 0 has a single aligned positive: no variance there
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = random_unit_rows(&mut rng, 8, 3);
        let labels = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let bias = vec![0, 0, 1, 1, 0, 0, 1, 1];
        let mut g = Graph::new();
        let view = discrete_view(&mut g, e, labels, bias);
        let skip = fairkl_penalty(&mut g, &view, &RegularizerConfig { fallback: Fallback::SkipAnchor, ..Default::default() }).unwrap();
        assert_eq!((skip.full, skip.fallback, skip.skipped), (0, 0, 8));
        assert_eq!(g.scalar(skip.value), 0.0);
        let mo = fairkl_penalty(&mut g, &view, &RegularizerConfig::default()).unwrap();
        assert_eq!((mo.full, mo.fallback, mo.skipped), (0, 8, 0));
        let direct = fairkl_penalty(&mut g, &view, &RegularizerConfig { kind: PenaltyKind::MeanOnly, ..Default::default() }).unwrap();
        assert!(close(g.scalar(mo.value), g.scalar(direct.value), 1e-15));
    }

    #[test]
    fn end_linear_is_the_signed_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (e, labels, bias) = ordered_batch(&mut rng, 3);
        let mut g = Graph::new();
        let view = discrete_view(&mut g, e, labels, bias);
        let p = fairkl_penalty(&mut g, &view, &RegularizerConfig { kind: PenaltyKind::EndLinear, ..Default::default() }).unwrap();
        let mut expect = 0.0;
        for a in 0..view.batch_size() {
            let m = group_moments(&mut g, &view, a).unwrap();
            expect += m.pos_conflicting.unwrap().mean - m.pos_aligned.unwrap().mean
                + m.neg_conflicting.unwrap().mean
                - m.neg_aligned.unwrap().mean;
        }
        assert!(close(g.scalar(p.value), expect / view.batch_size() as f64, 1e-12));
    }

    #[test]
    fn objective_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (e, labels, bias) = ordered_batch(&mut rng, 3);
        let mut g = Graph::new();
        let view = discrete_view(&mut g, e, labels, bias);
        let lc = LossConfig::default();
        let rc = RegularizerConfig::default();
        let l = contrastive_loss(&mut g, &view, &lc).unwrap();
        let o = combined_objective(&mut g, &view, &lc, &rc, 0.3, 0.0).unwrap();
        assert_eq!(g.scalar(o.total), 0.3 * g.scalar(l.value));
        assert!(o.reg.is_none());
        let o = combined_objective(&mut g, &view, &lc, &rc, 0.01, 0.5).unwrap();
        let p = fairkl_penalty(&mut g, &view, &rc).unwrap();
        assert!(close(g.scalar(o.total), 0.01 * g.scalar(l.value) + 0.5 * g.scalar(p.value), 1e-12));
        assert!(combined_objective(&mut g, &view, &lc, &rc, 0.0, 0.5).is_err());
        assert!(combined_objective(&mut g, &view, &lc, &rc, 1.0, -0.5).is_err());
    }

    #[test]
    fn penalty_and_objective_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let kinds = [PenaltyKind::MeanOnly, PenaltyKind::Kl, PenaltyKind::Jeffreys, PenaltyKind::EndLinear];
        for mode in [BiasMode::Discrete, BiasMode::Continuous] {
            for kind in kinds {
                for trial in 0..3 {
                    let raw = random_matrix(&mut rng, 12, 4, 1.0);
                    let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
                    let bias = match mode {
                        BiasMode::Discrete => BiasInfo::Discrete((0..12).map(|i| (i / 2) % 2).collect()),
                        BiasMode::Continuous => BiasInfo::Continuous(
                            Tensor::matrix(12, 12, (0..144).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap(),
                        ),
                    };
                    let cfg = RegularizerConfig { kind, bias_mode: mode, ..Default::default() };
                    let r = grad_check(
                        |g, x| {
                            let e = g.l2_normalize_rows(x)?;
                            let view = build_similarity_view(g, e, &labels, &bias, 0.1)?;
                            Ok(fairkl_penalty(g, &view, &cfg)?.value)
                        },
                        &raw,
                        1e-5,
                    )
                    .unwrap();
                    assert!(r.max_rel_error < 1e-4, "{mode:?} {kind:?} {trial}: {r:?}");
                }
            }
        }
        let raw = random_matrix(&mut rng, 12, 4, 1.0);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let bias = BiasInfo::Discrete((0..12).map(|i| (i / 3) % 2).collect());
        let lc = LossConfig { variant: LossVariant::EpsSupinfonceC, epsilon: 0.5, temperature: 0.5 };
        let r = grad_check(
            |g, x| {
                let e = g.l2_normalize_rows(x)?;
                let view = build_similarity_view(g, e, &labels, &bias, 0.5)?;
                Ok(combined_objective(g, &view, &lc, &RegularizerConfig::default(), 0.03, 0.75)?.total)
            },
            &raw,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_on_self(mp in -5.0f64..5.0, vp in 0.0f64..4.0, mq in -5.0f64..5.0, vq in 0.0f64..4.0) {
            let floor = DEFAULT_VARIANCE_FLOOR;
            prop_assert!(gaussian_kl_floored(mp, vp, mq, vq, floor) >= -1e-12);
            prop_assert_eq!(gaussian_kl_floored(mp, vp, mp, vp, floor), 0.0);
            let (vp, vq) = (vp.max(floor), vq.max(floor));
            prop_assert_eq!(jeffreys(mp, vp, mq, vq), jeffreys(mq, vq, mp, vp));
        }

        #[test]
        fn penalty_ignores_order_within_groups(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_unit_rows(&mut rng, 12, 3);
            let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
            let bias: Vec<usize> = (0..12).map(|i| (i / 2) % 2).collect();
            let mut g = Graph::new();
            let view = discrete_view(&mut g, e, labels, bias);
            let mut shuffled = view.clone();
            for s in &mut shuffled.anchors {
                s.pos_aligned.reverse();
                s.pos_conflicting.rotate_left(1);
                s.neg_aligned.rotate_right(1);
                s.neg_conflicting.reverse();
            }
            for kind in [PenaltyKind::MeanOnly, PenaltyKind::Kl, PenaltyKind::Jeffreys] {
                let cfg = RegularizerConfig { kind, ..Default::default() };
                let a = fairkl_penalty(&mut g, &view, &cfg).unwrap();
                let b = fairkl_penalty(&mut g, &shuffled, &cfg).unwrap();
                let (a, b) = (g.scalar(a.value), g.scalar(b.value));
                prop_assert!(close(a, b, 1e-12 * a.abs().max(1.0)), "{:?}: {} {}", kind, a, b);
            }
        }
    }
}
