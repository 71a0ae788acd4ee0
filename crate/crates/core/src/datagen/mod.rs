//! Biased datasets: Gaussian blobs with an injected bias subspace, and
//! background-colorized MNIST.

mod blobs;
mod idx;
mod mnist;
mod store;

pub use blobs::{gen_biased_blobs, BlobSpec};
pub use idx::{parse_idx, parse_idx_bytes, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxData};
pub use mnist::{colorize, default_palette, load_biased_mnist, BiasedMnistSpec, ColorizeParams};
pub use store::{read_dataset, write_dataset, write_manifest, DatasetFormat, ManifestRow};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One row of a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub bias_attr: usize,
    pub aligned: bool,
}

/// A labelled dataset with one bias attribute per sample.
///
/// `aligned[i]` holds exactly when `bias[i]` is the value designated for
/// `labels[i]`, which for every generator here is `labels[i] % n_bias_values`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × f`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub bias: Vec<usize>,
    pub aligned: Vec<bool>,
    pub n_classes: usize,
    pub n_bias_values: usize,
    /// Generator settings echoed into serialized headers.
    pub meta: serde_json::Value,
}

/// The bias value designated for a class.
pub fn designated_bias(label: usize, n_bias_values: usize) -> usize {
    label % n_bias_values
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        bias: Vec<usize>,
        n_classes: usize,
        n_bias_values: usize,
        meta: serde_json::Value,
    ) -> Result<Self> {
        let n = labels.len();
        if features.shape().len() != 2 || features.rows() != n || bias.len() != n {
            return Err(Error::InvalidArgument(format!(
                "dataset columns disagree: features {:?}, {} labels, {} bias values",
                features.shape(),
                n,
                bias.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {n_classes} classes")));
        }
        if let Some(b) = bias.iter().find(|&&b| b >= n_bias_values) {
            return Err(Error::InvalidArgument(format!("bias value {b} out of range for {n_bias_values} values")));
        }
        let aligned = labels
            .iter()
            .zip(&bias)
            .map(|(&l, &b)| b == designated_bias(l, n_bias_values))
            .collect();
        Ok(Self {
            features,
            labels,
            bias,
            aligned,
            n_classes,
            n_bias_values,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            features: self.features.row(i).to_vec(),
            label: self.labels[i],
            bias_attr: self.bias[i],
            aligned: self.aligned[i],
        }
    }

    pub fn aligned_count(&self) -> usize {
        self.aligned.iter().filter(|&&a| a).count()
    }

    pub fn conflicting_count(&self) -> usize {
        self.len() - self.aligned_count()
    }

    /// Rows `idx` as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let f = self.n_features();
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        Dataset {
            features: Tensor::matrix(idx.len(), f, data).expect("row-major subset"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            bias: idx.iter().map(|&i| self.bias[i]).collect(),
            aligned: idx.iter().map(|&i| self.aligned[i]).collect(),
            n_classes: self.n_classes,
            n_bias_values: self.n_bias_values,
            meta: self.meta.clone(),
        }
    }
}

/// A training set and its unbiased test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Draws a bias value: the designated one with probability `rho`, otherwise
/// uniform over the remaining `k − 1`.
pub(crate) fn draw_bias<R: rand::Rng>(rng: &mut R, label: usize, k: usize, rho: f64) -> usize {
    let designated = designated_bias(label, k);
    if k == 1 || rng.gen::<f64>() < rho {
        return designated;
    }
    let other = rng.gen_range(0..k - 1);
    if other >= designated {
        other + 1
    } else {
        other
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn aligned_flags_follow_designation() {
        let f = Tensor::zeros(&[4, 2]);
        let d = Dataset::new(f, vec![0, 1, 2, 3], vec![0, 2, 2, 0], 4, 3, serde_json::Value::Null).unwrap();
        assert_eq!(d.aligned, vec![true, false, true, true]);
        assert_eq!((d.aligned_count(), d.conflicting_count()), (3, 1));
        let s = d.subset(&[1, 3]);
        assert_eq!(s.labels, vec![1, 3]);
        assert_eq!(s.aligned, vec![false, true]);
    }

    #[test]
    fn rejects_out_of_range_columns() {
        let f = Tensor::zeros(&[2, 2]);
        assert!(Dataset::new(f.clone(), vec![0, 5], vec![0, 0], 2, 2, serde_json::Value::Null).is_err());
        assert!(Dataset::new(f.clone(), vec![0, 1], vec![0, 3], 2, 2, serde_json::Value::Null).is_err());
        assert!(Dataset::new(f, vec![0], vec![0], 2, 2, serde_json::Value::Null).is_err());
    }

    #[test]
    fn draw_bias_never_returns_designated_on_conflict() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 5];
        for _ in 0..5000 {
            counts[draw_bias(&mut rng, 2, 5, 0.0)] += 1;
        }
        assert_eq!(counts[2], 0);
        assert!(counts.iter().enumerate().filter(|(i, _)| *i != 2).all(|(_, &c)| c > 1000));
    }
}
