//! The ε-margin contrastive loss family.
//!
//! Every loss is built on the [`Graph`] so it can be differentiated, and
//! works on temperature-scaled similarities `s = cos/τ`. The margin ε is on
//! the same similarity scale. Batch losses are averaged over anchors;
//! anchors without at least one positive and one negative are skipped.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::SimilarityView;
use crate::tensor::log_sum_exp;

/// Ways of extending the single-positive ε-InfoNCE to several positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MultiPositive {
    /// One max over every (positive, negative) pair.
    A,
    /// One max per negative over all positives.
    B,
    /// One max per positive over all negatives (ε-SupInfoNCE).
    C,
    /// One max per (positive, negative) pair.
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    EpsInfonce,
    EpsSupinfonceA,
    EpsSupinfonceB,
    #[default]
    EpsSupinfonceC,
    EpsSupinfonceD,
    EpsSupcon,
    LSupIn,
}

impl LossVariant {
    pub const ALL: [LossVariant; 7] = [
        LossVariant::EpsInfonce,
        LossVariant::EpsSupinfonceA,
        LossVariant::EpsSupinfonceB,
        LossVariant::EpsSupinfonceC,
        LossVariant::EpsSupinfonceD,
        LossVariant::EpsSupcon,
        LossVariant::LSupIn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::EpsInfonce => "eps_infonce",
            LossVariant::EpsSupinfonceA => "eps_supinfonce_a",
            LossVariant::EpsSupinfonceB => "eps_supinfonce_b",
            LossVariant::EpsSupinfonceC => "eps_supinfonce_c",
            LossVariant::EpsSupinfonceD => "eps_supinfonce_d",
            LossVariant::EpsSupcon => "eps_supcon",
            LossVariant::LSupIn => "l_sup_in",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub epsilon: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::default(),
            epsilon: 0.0,
            temperature: crate::geometry::DEFAULT_TEMPERATURE,
        }
    }
}

impl LossConfig {
    /// Rejects negative margins; warns when ε exceeds the `2/τ` bound.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.exceeds_margin_bound() {
            log::warn!(
                "epsilon {} exceeds the 2/tau = {} bound on the similarity margin",
                self.epsilon,
                2.0 / self.temperature
            );
        }
        Ok(())
    }

    pub fn exceeds_margin_bound(&self) -> bool {
        self.epsilon > 2.0 / self.temperature
    }
}

/// A reduced batch loss.
#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub value: Var,
    /// Anchors that had no positive or no negative.
    pub skipped: usize,
    pub contributing: usize,
}

fn as_vector(g: &mut Graph, v: Var) -> Result<Var> {
    if g.shape(v).is_empty() {
        g.concat(&[v])
    } else {
        Ok(v)
    }
}

/// `−log( exp(s⁺) / (exp(s⁺−ε) + Σ_j exp(s⁻_j)) )` for one positive.
pub fn eps_infonce(g: &mut Graph, s_pos: Var, s_negs: Var, epsilon: f64) -> Result<Var> {
    if g.value(s_negs).is_empty() {
        return Err(Error::InvalidArgument("eps_infonce needs at least one negative".into()));
    }
    let p = as_vector(g, s_pos)?;
    if g.value(p).len() != 1 {
        return Err(Error::InvalidArgument("eps_infonce takes exactly one positive".into()));
    }
    let per = supinfonce_c_terms(g, p, s_negs, epsilon)?;
    g.sum(per)
}

/// Per-positive terms `LSE(s⁺_i − ε, s⁻) − s⁺_i`.
fn supinfonce_c_terms(g: &mut Graph, pos: Var, negs: Var, epsilon: f64) -> Result<Var> {
    let shifted = g.add_scalar(pos, -epsilon)?;
    let lse = g.log_sum_exp_with_extra(negs, shifted)?;
    g.sub(lse, pos)
}

/// `log Σ_i exp(S − s⁺_i)` with `S = Σ_i s⁺_i`, i.e. the log of
/// `Σ_i exp(Σ_{t≠i} s⁺_t)`.
fn leave_one_out_lse(g: &mut Graph, pos: Var, total: Var) -> Result<Var> {
    let n = g.value(pos).len();
    let t = g.expand(total, &[n])?;
    let rest = g.sub(t, pos)?;
    g.log_sum_exp(rest)
}

/// Per-anchor closed form of the chosen multi-positive extension.
fn multi_positive_anchor(g: &mut Graph, pos: Var, negs: Var, epsilon: f64, variant: MultiPositive) -> Result<Var> {
    match variant {
        MultiPositive::C => {
            let terms = supinfonce_c_terms(g, pos, negs, epsilon)?;
            g.sum(terms)
        }
        MultiPositive::A => {
            // −log( exp(S) / (exp(S−ε) + (Σ_j exp s⁻_j)(Σ_i exp Σ_{t≠i} s⁺_t)) )
            let total = g.sum(pos)?;
            let first = g.add_scalar(total, -epsilon)?;
            let neg_lse = g.log_sum_exp(negs)?;
            let loo = leave_one_out_lse(g, pos, total)?;
            let second = g.add(neg_lse, loo)?;
            let both = g.concat(&[first, second])?;
            let denom = g.log_sum_exp(both)?;
            g.sub(denom, total)
        }
        MultiPositive::B => {
            // −Σ_j log( exp(S) / (exp(S−ε) + exp(s⁻_j)(Σ_i exp Σ_{t≠i} s⁺_t)) )
            let n_neg = g.value(negs).len();
            let total = g.sum(pos)?;
            let first = g.add_scalar(total, -epsilon)?;
            let first = g.concat(&[first])?;
            let loo = leave_one_out_lse(g, pos, total)?;
            let loo = g.expand(loo, &[n_neg])?;
            let seconds = g.add(negs, loo)?;
            let denoms = g.log_sum_exp_with_extra(first, seconds)?;
            let denom_sum = g.sum(denoms)?;
            let totals = g.scale(total, n_neg as f64)?;
            g.sub(denom_sum, totals)
        }
        MultiPositive::D => {
            // −Σ_i Σ_j log( exp(s⁺_i) / (exp(s⁺_i−ε) + exp(s⁻_j)) )
            let n_pos = g.value(pos).len();
            let n_neg = g.value(negs).len();
            let shifted = g.add_scalar(pos, -epsilon)?;
            let mut parts = Vec::with_capacity(n_pos);
            for i in 0..n_pos {
                let si = g.gather(shifted, &[i])?;
                let denoms = g.log_sum_exp_with_extra(si, negs)?;
                parts.push(g.sum(denoms)?);
            }
            let denom_sum = g.concat(&parts)?;
            let denom_sum = g.sum(denom_sum)?;
            let pos_sum = g.sum(pos)?;
            let pos_sum = g.scale(pos_sum, n_neg as f64)?;
            g.sub(denom_sum, pos_sum)
        }
    }
}

/// Gathers each usable anchor's positive and negative similarity vectors and
/// reduces `per_anchor` over them by the mean.
fn reduce_over_anchors(
    g: &mut Graph,
    view: &SimilarityView,
    mut per_anchor: impl FnMut(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<LossOutput> {
    let mut terms = Vec::with_capacity(view.anchors.len());
    let mut skipped = 0;
    for (a, sets) in view.anchors.iter().enumerate() {
        if sets.positives.is_empty() || sets.negatives.is_empty() {
            skipped += 1;
            continue;
        }
        let pos = g.gather(view.sims, &view.flat(a, &sets.positives))?;
        let negs = g.gather(view.sims, &view.flat(a, &sets.negatives))?;
        terms.push(per_anchor(g, pos, negs)?);
    }
    if terms.is_empty() {
        return Err(Error::DegenerateBatch(
            "every anchor lacks a positive or a negative".into(),
        ));
    }
    if skipped > 0 {
        log::debug!("{skipped} anchors skipped (no positive or no negative)");
    }
    let stacked = g.concat(&terms)?;
    let value = g.mean(stacked)?;
    Ok(LossOutput {
        value,
        skipped,
        contributing: terms.len(),
    })
}

/// ε-SupInfoNCE (variant c) and the alternative multi-positive forms.
pub fn eps_supinfonce(g: &mut Graph, view: &SimilarityView, epsilon: f64, variant: MultiPositive) -> Result<LossOutput> {
    reduce_over_anchors(g, view, |g, pos, negs| multi_positive_anchor(g, pos, negs, epsilon, variant))
}

/// Batch ε-InfoNCE: every positive pair is its own single-positive term and
/// the terms are averaged within each anchor.
pub fn eps_infonce_batch(g: &mut Graph, view: &SimilarityView, epsilon: f64) -> Result<LossOutput> {
    reduce_over_anchors(g, view, |g, pos, negs| {
        let terms = supinfonce_c_terms(g, pos, negs, epsilon)?;
        g.mean(terms)
    })
}

/// ε-SupCon: `−(1/P) Σ_i log( exp(s⁺_i) / (Σ_t exp(s⁺_t−ε) + Σ_j exp(s⁻_j)) )`.
pub fn eps_supcon(g: &mut Graph, view: &SimilarityView, epsilon: f64) -> Result<LossOutput> {
    reduce_over_anchors(g, view, |g, pos, negs| {
        let shifted = g.add_scalar(pos, -epsilon)?;
        let all = g.concat(&[shifted, negs])?;
        let denom = g.log_sum_exp(all)?;
        let mean_pos = g.mean(pos)?;
        g.sub(denom, mean_pos)
    })
}

/// `L_sup_in`: `−log( Σ_i exp(s⁺_i) / (Σ_t exp(s⁺_t) + Σ_j exp(s⁻_j)) )`.
pub fn l_sup_in(g: &mut Graph, view: &SimilarityView) -> Result<LossOutput> {
    reduce_over_anchors(g, view, |g, pos, negs| {
        let all = g.concat(&[pos, negs])?;
        let denom = g.log_sum_exp(all)?;
        let num = g.log_sum_exp(pos)?;
        g.sub(denom, num)
    })
}

/// Dispatches on [`LossConfig::variant`].
pub fn contrastive_loss(g: &mut Graph, view: &SimilarityView, cfg: &LossConfig) -> Result<LossOutput> {
    let eps = cfg.epsilon;
    match cfg.variant {
        LossVariant::EpsInfonce => eps_infonce_batch(g, view, eps),
        LossVariant::EpsSupinfonceA => eps_supinfonce(g, view, eps, MultiPositive::A),
        LossVariant::EpsSupinfonceB => eps_supinfonce(g, view, eps, MultiPositive::B),
        LossVariant::EpsSupinfonceC => eps_supinfonce(g, view, eps, MultiPositive::C),
        LossVariant::EpsSupinfonceD => eps_supinfonce(g, view, eps, MultiPositive::D),
        LossVariant::EpsSupcon => eps_supcon(g, view, eps),
        LossVariant::LSupIn => l_sup_in(g, view),
    }
}

/// Evaluates `eps_infonce` on plain numbers.
pub fn eps_infonce_value(s_pos: f64, s_negs: &[f64], epsilon: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(crate::tensor::Tensor::vector(vec![s_pos]))?;
    let n = g.constant(crate::tensor::Tensor::vector(s_negs.to_vec()))?;
    let l = eps_infonce(&mut g, p, n, epsilon)?;
    Ok(g.scalar(l))
}

/// The InfoNCE and InfoL1O log-ratio estimates for one positive.
///
/// The first never exceeds the second: its denominator also contains the
/// positive term.
pub fn estimator_ordering_check(s_pos: f64, s_negs: &[f64]) -> Result<(f64, f64)> {
    if s_negs.is_empty() {
        return Err(Error::InvalidArgument("need at least one negative".into()));
    }
    let mut all = Vec::with_capacity(s_negs.len() + 1);
    all.push(s_pos);
    all.extend_from_slice(s_negs);
    let infonce = s_pos - log_sum_exp(&all);
    let infol1o = s_pos - log_sum_exp(s_negs);
    Ok((infonce, infol1o))
}
