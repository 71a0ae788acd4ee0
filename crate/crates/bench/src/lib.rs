//! Fixtures shared by the criterion benches.

use epsmargin_core::{BiasInfo, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A `b × d` raw embedding matrix with `classes` labels and two bias values.
pub fn batch(b: usize, d: usize, classes: usize, seed: u64) -> (Tensor, Vec<usize>, BiasInfo) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..b).map(|i| i % classes).collect();
    let bias = (0..b).map(|i| (i / classes) % 2).collect();
    (Tensor::matrix(b, d, raw).expect("shape"), labels, BiasInfo::Discrete(bias))
}

pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}
