//! Multinomial logistic regression on frozen features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided, Tensor};

/// Top-1 accuracies on an evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accuracies {
    pub overall: f64,
    pub aligned: f64,
    pub conflicting: f64,
}

/// A fitted probe.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    /// `f × C`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub iterations: usize,
    pub final_grad_norm: f64,
}

impl LinearProbe {
    /// Full-batch gradient descent on the mean cross-entropy, from zero,
    /// until the gradient norm drops below `tol` or `max_iters` is reached.
    ///
    /// The step size is the inverse of a curvature bound,
    /// `1 / (½ · (mean ‖x‖² + 1))`.
    pub fn fit(x: &Tensor, labels: &[usize], n_classes: usize, max_iters: usize, tol: f64) -> Result<Self> {
        let (n, f) = (x.rows(), x.cols());
        if n == 0 || labels.len() != n {
            return Err(Error::InvalidArgument(format!("probe on {n} rows with {} labels", labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {n_classes} classes")));
        }
        let sq = x.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        if is_degenerate(x) {
            log::warn!("probe features are identical across rows; accuracy will be at the majority rate");
        }
        let lr = 1.0 / (0.5 * (sq + 1.0));
        let c = n_classes;
        let mut w = vec![0.0; f * c];
        let mut b = vec![0.0; c];
        let mut logits = vec![0.0; n * c];
        let mut gw = vec![0.0; f * c];
        let mut grad_norm = f64::INFINITY;
        let mut it = 0;
        while it < max_iters {
            gemm(n, f, c, x.data(), &w, &mut logits);
            let mut gb = vec![0.0; c];
            for (row, &y) in logits.chunks_exact_mut(c).zip(labels) {
                for (z, bk) in row.iter_mut().zip(&b) {
                    *z += bk;
                }
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for z in row.iter_mut() {
                    *z = (*z - m).exp();
                    s += *z;
                }
                for (k, z) in row.iter_mut().enumerate() {
                    *z = (*z / s - f64::from(k == y)) / n as f64;
                    gb[k] += *z;
                }
            }
            // gW = Xᵀ · (P − Y) / n
            gemm_strided(f, n, c, x.data(), (1, f as isize), &logits, (c as isize, 1), &mut gw, 0.0);
            grad_norm = gw.iter().chain(&gb).map(|v| v * v).sum::<f64>().sqrt();
            if grad_norm < tol {
                break;
            }
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= lr * gi;
            }
            for (bi, gi) in b.iter_mut().zip(&gb) {
                *bi -= lr * gi;
            }
            it += 1;
        }
        Ok(Self {
            weights: Tensor::matrix(f, c, w)?,
            bias: b,
            iterations: it,
            final_grad_norm: grad_norm,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let c = self.bias.len();
        if x.cols() != self.weights.rows() {
            return Err(Error::ShapeMismatch {
                op: "probe_predict",
                left: x.shape().to_vec(),
                right: self.weights.shape().to_vec(),
            });
        }
        let mut logits = vec![0.0; x.rows() * c];
        gemm(x.rows(), x.cols(), c, x.data(), self.weights.data(), &mut logits);
        Ok(logits
            .chunks_exact(c)
            .map(|row| {
                let mut best = 0;
                for k in 1..c {
                    if row[k] + self.bias[k] > row[best] + self.bias[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    pub fn evaluate(&self, x: &Tensor, labels: &[usize], aligned: &[bool]) -> Result<Accuracies> {
        let pred = self.predict(x)?;
        Ok(split_accuracies(&pred, labels, aligned))
    }
}

fn is_degenerate(x: &Tensor) -> bool {
    x.rows() > 1 && (1..x.rows()).all(|i| x.row(i) == x.row(0))
}

/// Accuracy overall and on the aligned / conflicting subsets. An empty
/// subset reports 0.
pub fn split_accuracies(pred: &[usize], labels: &[usize], aligned: &[bool]) -> Accuracies {
    let (mut hit, mut ha, mut na, mut hc, mut nc) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for ((&p, &y), &a) in pred.iter().zip(labels).zip(aligned) {
        let ok = usize::from(p == y);
        hit += ok;
        if a {
            ha += ok;
            na += 1;
        } else {
            hc += ok;
            nc += 1;
        }
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Accuracies {
        overall: frac(hit, pred.len()),
        aligned: frac(ha, na),
        conflicting: frac(hc, nc),
    }
}
