//! Unit-sphere embeddings, temperature-scaled similarities and the
//! per-anchor positive/negative, aligned/conflicting index sets.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on row norms accepted as "unit".
pub const UNIT_NORM_TOL: f64 = 1e-9;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Bias information attached to a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BiasInfo {
    /// One bias attribute per sample.
    Discrete(Vec<usize>),
    /// Pairwise bias-similarity scores in `[0, 1]`, `B×B`.
    Continuous(Tensor),
}

/// A batch of unit-norm embeddings with labels and bias information.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
    pub bias: BiasInfo,
    pub temperature: f64,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Tensor, labels: Vec<usize>, bias: BiasInfo, temperature: f64) -> Result<Self> {
        let b = embeddings.rows();
        if embeddings.shape().len() != 2 {
            return Err(Error::InvalidArgument("embeddings must be a B×d matrix".into()));
        }
        if labels.len() != b {
            return Err(Error::InvalidArgument(format!("{} labels for {b} embeddings", labels.len())));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
        }
        for i in 0..b {
            let norm = embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidArgument(format!("row {i} has norm {norm}, expected 1")));
            }
        }
        validate_bias(&bias, b)?;
        Ok(Self {
            embeddings,
            labels,
            bias,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn validate_bias(bias: &BiasInfo, b: usize) -> Result<()> {
    match bias {
        BiasInfo::Discrete(attrs) if attrs.len() != b => Err(Error::InvalidArgument(format!(
            "{} bias attributes for {b} samples",
            attrs.len()
        ))),
        BiasInfo::Continuous(scores) => {
            if scores.shape() != [b, b] {
                return Err(Error::ShapeMismatch {
                    op: "bias_scores",
                    left: scores.shape().to_vec(),
                    right: vec![b, b],
                });
            }
            if let Some(v) = scores.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidArgument(format!("bias score {v} outside [0, 1]")));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Index sets of one anchor. All indices are batch rows; the anchor itself
/// never appears.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnchorSets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub pos_aligned: Vec<usize>,
    pub pos_conflicting: Vec<usize>,
    pub neg_aligned: Vec<usize>,
    pub neg_conflicting: Vec<usize>,
}

/// Differentiable similarity and distance structure of a batch.
#[derive(Debug, Clone)]
pub struct SimilarityView {
    /// `B×B`, `sims[a][i] = ⟨f(x_a), f(x_i)⟩ / τ`.
    pub sims: Var,
    /// `B×B` squared L2 distances, temperature-free.
    pub dists: Var,
    pub temperature: f64,
    pub labels: Vec<usize>,
    pub anchors: Vec<AnchorSets>,
    /// Present in continuous bias mode.
    pub bias_scores: Option<Tensor>,
}

impl SimilarityView {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    /// Flat row-major indices of `(anchor, i)` pairs into the `B×B` matrices.
    pub fn flat(&self, anchor: usize, idx: &[usize]) -> Vec<usize> {
        let b = self.batch_size();
        idx.iter().map(|i| anchor * b + i).collect()
    }

    /// Inserts a batch as a differentiable leaf and builds its view.
    pub fn from_batch(g: &mut Graph, batch: &EmbeddingBatch) -> Result<(Var, SimilarityView)> {
        let emb = g.param(batch.embeddings.clone())?;
        let view = build_similarity_view(g, emb, &batch.labels, &batch.bias, batch.temperature)?;
        Ok((emb, view))
    }
}

/// Maps raw encoder outputs onto the unit sphere, row by row.
pub fn normalize_embeddings(g: &mut Graph, raw: Var) -> Result<Var> {
    g.l2_normalize_rows(raw)
}

/// Builds sims, dists and the per-anchor index sets from unit-norm rows.
pub fn build_similarity_view(
    g: &mut Graph,
    embeddings: Var,
    labels: &[usize],
    bias: &BiasInfo,
    temperature: f64,
) -> Result<SimilarityView> {
    let b = labels.len();
    if b < 2 {
        return Err(Error::DegenerateBatch(format!("batch of size {b}")));
    }
    if g.shape(embeddings).first() != Some(&b) {
        return Err(Error::InvalidArgument("labels and embeddings disagree on batch size".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    validate_bias(bias, b)?;

    let gram = g.matmul_t(embeddings, embeddings)?;
    let sims = g.scale(gram, 1.0 / temperature)?;
    let dists = g.pairwise_sq_dist(embeddings)?;

    let mut anchors = Vec::with_capacity(b);
    for a in 0..b {
        let mut sets = AnchorSets::default();
        for i in (0..b).filter(|&i| i != a) {
            let positive = labels[i] == labels[a];
            let aligned = match bias {
                BiasInfo::Discrete(attrs) => Some(attrs[i] == attrs[a]),
                BiasInfo::Continuous(_) => None,
            };
            match (positive, aligned) {
                (true, Some(true)) => sets.pos_aligned.push(i),
                (true, Some(false)) => sets.pos_conflicting.push(i),
                (false, Some(true)) => sets.neg_aligned.push(i),
                (false, Some(false)) => sets.neg_conflicting.push(i),
                _ => {}
            }
            if positive {
                sets.positives.push(i);
            } else {
                sets.negatives.push(i);
            }
        }
        if sets.positives.is_empty() && sets.negatives.is_empty() {
            return Err(Error::DegenerateBatch(format!("anchor {a} has no positives and no negatives")));
        }
        anchors.push(sets);
    }

    Ok(SimilarityView {
        sims,
        dists,
        temperature,
        labels: labels.to_vec(),
        anchors,
        bias_scores: match bias {
            BiasInfo::Continuous(s) => Some(s.clone()),
            BiasInfo::Discrete(_) => None,
        },
    })
}
