use std::io::Write;
use std::path::Path;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Counts of positive-pair similarities over `[−1/τ, 1/τ]`, split by
/// whether the two samples share their bias attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityHistogram {
    pub epoch: usize,
    pub lo: f64,
    pub hi: f64,
    pub aligned: Vec<u64>,
    pub conflicting: Vec<u64>,
}

impl SimilarityHistogram {
    pub fn bins(&self) -> usize {
        self.aligned.len()
    }

    pub fn edges(&self, k: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.bins() as f64;
        (self.lo + k as f64 * w, self.lo + (k + 1) as f64 * w)
    }

    pub fn total(&self) -> u64 {
        self.aligned.iter().chain(&self.conflicting).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "bin_lo,bin_hi,aligned,conflicting")?;
        for k in 0..self.bins() {
            let (a, b) = self.edges(k);
            writeln!(w, "{a},{b},{},{}", self.aligned[k], self.conflicting[k])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean and variance of the aligned counts' bin centres.
    pub fn aligned_moments(&self) -> (f64, f64) {
        self.moments(&self.aligned)
    }

    pub fn conflicting_moments(&self) -> (f64, f64) {
        self.moments(&self.conflicting)
    }

    fn moments(&self, counts: &[u64]) -> (f64, f64) {
        let n: u64 = counts.iter().sum();
        if n == 0 {
            return (f64::NAN, f64::NAN);
        }
        let centre = |k: usize| {
            let (a, b) = self.edges(k);
            0.5 * (a + b)
        };
        let mean = counts.iter().enumerate().map(|(k, &c)| c as f64 * centre(k)).sum::<f64>() / n as f64;
        let var = counts.iter().enumerate().map(|(k, &c)| c as f64 * (centre(k) - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, var)
    }

    /// Largest gap between the two normalised cumulative distributions.
    pub fn ks_distance(&self) -> f64 {
        let (na, nc) = (self.aligned.iter().sum::<u64>() as f64, self.conflicting.iter().sum::<u64>() as f64);
        if na == 0.0 || nc == 0.0 {
            return f64::NAN;
        }
        let (mut ca, mut cc, mut worst) = (0.0, 0.0, 0.0f64);
        for k in 0..self.bins() {
            ca += self.aligned[k] as f64 / na;
            cc += self.conflicting[k] as f64 / nc;
            worst = worst.max((ca - cc).abs());
        }
        worst
    }
}

/// Histograms every unordered positive pair among the first `max_samples`
/// rows of `embeddings` (unit rows aligned with `data`).
pub fn similarity_histograms(
    embeddings: &Tensor,
    data: &Dataset,
    temperature: f64,
    bins: usize,
    max_samples: usize,
    epoch: usize,
) -> Result<SimilarityHistogram> {
    if bins == 0 || !(temperature > 0.0) {
        return Err(Error::InvalidArgument("histogram needs bins >= 1 and temperature > 0".into()));
    }
    if embeddings.rows() != data.len() {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings for {} samples",
            embeddings.rows(),
            data.len()
        )));
    }
    let (lo, hi) = (-1.0 / temperature, 1.0 / temperature);
    let mut h = SimilarityHistogram {
        epoch,
        lo,
        hi,
        aligned: vec![0; bins],
        conflicting: vec![0; bins],
    };
    let n = data.len().min(max_samples);
    let width = (hi - lo) / bins as f64;
    for i in 0..n {
        for j in i + 1..n {
            if data.labels[i] != data.labels[j] {
                continue;
            }
            let cos: f64 = embeddings.row(i).iter().zip(embeddings.row(j)).map(|(a, b)| a * b).sum();
            let s = cos / temperature;
            let k = (((s - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            if data.bias[i] == data.bias[j] {
                h.aligned[k] += 1;
            } else {
                h.conflicting[k] += 1;
            }
        }
    }
    Ok(h)
}
