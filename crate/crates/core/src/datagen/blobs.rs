use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{draw_bias, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian blobs whose features are `[signal | bias]`.
///
/// Class means live in the signal block and bias-value means in the bias
/// block; both are seeded random unit directions scaled by `signal_scale`
/// and `bias_scale`, and every coordinate gets `N(0, noise_scale²)` noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobSpec {
    pub n_classes: usize,
    /// Defaults to `n_classes`.
    pub n_bias_values: Option<usize>,
    pub dim_signal: usize,
    pub dim_bias: usize,
    pub rho: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub signal_scale: f64,
    pub bias_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_bias_values: None,
            dim_signal: 16,
            dim_bias: 16,
            rho: 0.99,
            n_train: 4000,
            n_test: 2000,
            signal_scale: 2.0,
            bias_scale: 4.0,
            noise_scale: 0.5,
            seed: 0,
        }
    }
}

impl BlobSpec {
    pub fn k(&self) -> usize {
        self.n_bias_values.unwrap_or(self.n_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must be in (0, 1], got {}", self.rho));
        }
        if self.n_classes < 2 || self.k() < 1 {
            return bad("need at least 2 classes and 1 bias value".into());
        }
        if self.dim_signal < 1 || self.dim_bias < 1 {
            return bad("dimensions must be >= 1".into());
        }
        if self.n_train < self.n_classes || self.n_test < self.n_classes {
            return bad(format!("n_train and n_test must be >= n_classes ({})", self.n_classes));
        }
        for (name, v) in [
            ("signal_scale", self.signal_scale),
            ("bias_scale", self.bias_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

fn unit_directions(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

fn sample_split(
    spec: &BlobSpec,
    class_means: &[Vec<f64>],
    bias_means: &[Vec<f64>],
    n: usize,
    rho: f64,
    stream: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let k = spec.k();
    let noise = Normal::new(0.0, spec.noise_scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
    labels.shuffle(&mut rng);
    let f = spec.dim_signal + spec.dim_bias;
    let mut data = Vec::with_capacity(n * f);
    let mut bias = Vec::with_capacity(n);
    for &label in &labels {
        let b = draw_bias(&mut rng, label, k, rho);
        bias.push(b);
        for m in &class_means[label] {
            data.push(m * spec.signal_scale + noise.sample(&mut rng));
        }
        for m in &bias_means[b] {
            data.push(m * spec.bias_scale + noise.sample(&mut rng));
        }
    }
    let meta = serde_json::json!({ "generator": "blobs", "spec": spec, "rho": rho });
    Dataset::new(Tensor::matrix(n, f, data)?, labels, bias, spec.n_classes, k, meta)
}

/// Biased training split at `spec.rho` and an unbiased test split at `1/K`.
pub fn gen_biased_blobs(spec: &BlobSpec) -> Result<Split> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let class_means = unit_directions(&mut rng, spec.n_classes, spec.dim_signal);
    let bias_means = unit_directions(&mut rng, spec.k(), spec.dim_bias);
    let train = sample_split(spec, &class_means, &bias_means, spec.n_train, spec.rho, 1)?;
    let test = sample_split(spec, &class_means, &bias_means, spec.n_test, 1.0 / spec.k() as f64, 2)?;
    Ok(Split { train, test })
}
