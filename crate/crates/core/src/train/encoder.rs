use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// MLP shape; the input width comes from the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            embedding_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl EncoderSpec {
    pub fn new(input_dim: usize, model: &ModelSpec) -> Self {
        Self {
            input_dim,
            hidden: model.hidden.clone(),
            embedding_dim: model.embedding_dim,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.embedding_dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) {
            return Err(Error::InvalidArgument(format!("encoder widths must be positive: {:?}", self.widths())));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// ReLU MLP followed by row-wise L2 normalization.
///
/// Parameters alternate weight (`in × out`) and bias (`out`) per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub params: Vec<Tensor>,
}

impl Encoder {
    /// Uniform fan-in initialisation: weights in `±sqrt(6 / fan_in)`, biases 0.
    pub fn init(spec: EncoderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        for w in spec.widths().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Tensor::matrix(fan_in, fan_out, data)?);
            params.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self { spec, params })
    }

    /// Registers the parameters on `g` as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Unit-norm embeddings of the rows of `x` using bound parameters.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let layers = params.len() / 2;
        let mut h = x;
        for (l, wb) in params.chunks_exact(2).enumerate() {
            let z = g.matmul(h, wb[0])?;
            h = g.add_row_broadcast(z, wb[1])?;
            if l + 1 < layers {
                h = g.relu(h)?;
            }
        }
        g.l2_normalize_rows(h)
    }

    /// Embeds `features` (`n × input_dim`) without recording gradients.
    pub fn embed(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.spec.input_dim {
            return Err(Error::ShapeMismatch {
                op: "embed",
                left: features.shape().to_vec(),
                right: vec![self.spec.input_dim],
            });
        }
        let mut out = Vec::with_capacity(features.rows() * self.spec.embedding_dim);
        let chunk = 1024;
        for start in (0..features.rows()).step_by(chunk) {
            let end = (start + chunk).min(features.rows());
            let rows = features.data()[start * features.cols()..end * features.cols()].to_vec();
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(end - start, features.cols(), rows)?)?;
            let params: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect::<Result<_>>()?;
            let e = self.forward(&mut g, &params, x)?;
            out.extend_from_slice(g.value(e).data());
        }
        Tensor::matrix(features.rows(), self.spec.embedding_dim, out)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// Rebuilds an encoder from [`flat_params`](Self::flat_params) output.
    pub fn from_flat(spec: EncoderSpec, flat: &[f64]) -> Result<Self> {
        spec.validate()?;
        if flat.len() != spec.param_count() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters for an encoder that needs {}",
                flat.len(),
                spec.param_count()
            )));
        }
        let mut params = Vec::new();
        let mut at = 0;
        for w in spec.widths().windows(2) {
            let n = w[0] * w[1];
            params.push(Tensor::matrix(w[0], w[1], flat[at..at + n].to_vec())?);
            at += n;
            params.push(Tensor::vector(flat[at..at + w[1]].to_vec()));
            at += w[1];
        }
        Ok(Self { spec, params })
    }
}
