use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    SgdMomentum,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// ×0.1 at one third and two thirds of the epochs.
    #[default]
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSpec {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
}

impl Default for OptimSpec {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Adam,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            momentum: 0.9,
            epochs: 30,
            batch_size: 256,
            schedule: Schedule::Step,
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 4 {
            return bad(format!("batch_size must be >= 4, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(0.0..1.0).contains(&self.momentum) {
            return bad("beta1, beta2 and momentum must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Step => {
                let e = self.epochs as f64;
                let drops = [e / 3.0, 2.0 * e / 3.0].iter().filter(|&&m| epoch as f64 >= m.round()).count();
                self.lr * 0.1f64.powi(drops as i32)
            }
        }
    }
}

/// Adam or SGD with momentum, with PyTorch's coupled L2 weight decay.
#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimSpec,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(spec: &OptimSpec, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            spec: spec.clone(),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` may be `None` for a parameter the
    /// objective did not reach.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::InvalidArgument("parameter and gradient lists disagree".into()));
        }
        self.step += 1;
        let s = &self.spec;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - s.beta1.powi(t), 1.0 - s.beta2.powi(t));
        for (k, p) in params.iter_mut().enumerate() {
            let grad = grads[k].as_ref().map(Tensor::data);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[i]) + s.weight_decay * *x;
                match s.algorithm {
                    Algorithm::Adam => {
                        m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g;
                        v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
                        let denom = (v[i] / bc2).sqrt() + s.adam_eps;
                        *x -= lr * (m[i] / bc1) / denom;
                    }
                    Algorithm::SgdMomentum => {
                        m[i] = if t == 1 { g } else { s.momentum * m[i] + g };
                        *x -= lr * m[i];
                    }
                }
            }
        }
        Ok(())
    }
}
