//! ε-margin contrastive losses, the FairKL debiasing penalty, and the small
//! autodiff, data, and training machinery needed to run them.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod fairkl;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod oracles;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use fairkl::{BiasMode, Fallback, PenaltyKind, RegularizerConfig};
pub use geometry::{AnchorSets, BiasInfo, EmbeddingBatch, SimilarityView};
pub use losses::{LossConfig, LossOutput, LossVariant, MultiPositive};
pub use tensor::Tensor;
pub use train::{Encoder, MetricsRow, TrainOutcome, TrainSettings};
