//! Encoder training on the combined objective, linear-probe evaluation and
//! similarity histograms.

mod batches;
mod encoder;
mod hist;
mod optim;
mod probe;

pub use batches::stratified_batches;
pub use encoder::{Encoder, EncoderSpec, ModelSpec};
pub use hist::{similarity_histograms, SimilarityHistogram};
pub use optim::{Algorithm, OptimSpec, Optimizer, Schedule};
pub use probe::{split_accuracies, Accuracies, LinearProbe};

use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::fairkl::{combined_objective, BiasMode, RegularizerConfig};
use crate::geometry::{build_similarity_view, BiasInfo};
use crate::losses::LossConfig;
use crate::tensor::Tensor;

/// `α · loss + λ · penalty` weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSpec {
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self { alpha: 1.0, lambda: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Gradient-descent iteration cap for the probe.
    pub probe_epochs: usize,
    /// Gradient-norm stopping threshold for the probe.
    pub probe_tol: f64,
    /// Probe every this many epochs; the last epoch is always probed.
    pub probe_every: usize,
    pub hist_bins: usize,
    /// Training rows used for the similarity histograms.
    pub hist_max_samples: usize,
    /// When false, `wall_ms` is written as 0 so reruns are byte-identical.
    pub record_wall_time: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            probe_epochs: 500,
            probe_tol: 1e-5,
            probe_every: 1,
            hist_bins: 50,
            hist_max_samples: 1000,
            record_wall_time: false,
        }
    }
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSettings {
    pub model: ModelSpec,
    pub optim: OptimSpec,
    pub loss: LossConfig,
    pub regularizer: RegularizerConfig,
    pub objective: ObjectiveSpec,
    pub eval: EvalSpec,
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.loss.validate()?;
        self.regularizer.validate()?;
        if !(self.objective.alpha > 0.0) || !(self.objective.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need alpha > 0 and lambda >= 0, got alpha={} lambda={}",
                self.objective.alpha, self.objective.lambda
            )));
        }
        if self.eval.probe_every == 0 || self.eval.hist_bins == 0 {
            return Err(Error::InvalidArgument("probe_every and hist_bins must be >= 1".into()));
        }
        Ok(())
    }
}

/// Supplies pairwise bias-similarity scores for a batch in continuous mode.
pub trait BiasScoreProvider: Sync {
    /// `B×B` scores in `[0, 1]` for the rows `idx` of `data`.
    fn scores(&self, data: &Dataset, idx: &[usize]) -> Tensor;
}

/// Scores from the generator's own bias attributes: `1 − softness` for a
/// shared attribute and `softness` otherwise.
#[derive(Debug, Clone, Copy)]
pub struct OracleScores {
    pub softness: f64,
}

impl BiasScoreProvider for OracleScores {
    fn scores(&self, data: &Dataset, idx: &[usize]) -> Tensor {
        let b = idx.len();
        let mut s = Vec::with_capacity(b * b);
        for &i in idx {
            for &j in idx {
                s.push(if data.bias[i] == data.bias[j] { 1.0 - self.softness } else { self.softness });
            }
        }
        Tensor::matrix(b, b, s).expect("square")
    }
}

/// One epoch of training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// 1-based.
    pub epoch: usize,
    /// Mean over batches of `α · loss`.
    pub loss: f64,
    /// Mean over batches of `λ · penalty`.
    pub reg: f64,
    /// Anchors skipped by the loss over the epoch.
    pub skipped: usize,
    /// Unbiased-test probe accuracies, absent on epochs that were not probed.
    pub acc: Option<Accuracies>,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "epoch,loss,reg,skipped,acc_overall,acc_aligned,acc_conflicting,wall_ms";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let acc = match self.acc {
            Some(a) => format!("{},{},{}", a.overall, a.aligned, a.conflicting),
            None => ",,".to_string(),
        };
        format!("{},{},{},{},{},{}", self.epoch, self.loss, self.reg, self.skipped, acc, self.wall_ms)
    }
}

/// Receives progress while training runs.
pub trait TrainObserver {
    fn on_epoch(&mut self, _row: &MetricsRow, _encoder: &Encoder) -> Result<()> {
        Ok(())
    }
    fn on_histogram(&mut self, _hist: &SimilarityHistogram) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: Encoder,
    pub history: Vec<MetricsRow>,
    pub histograms: Vec<SimilarityHistogram>,
}

/// Epochs (1-based) at which similarity histograms are taken.
pub fn histogram_epochs(epochs: usize) -> Vec<usize> {
    let mut e = vec![1, epochs.div_ceil(2), epochs];
    e.dedup();
    e
}

/// Embeds both splits, fits the probe on `train` and scores it on `test`.
pub fn linear_probe(encoder: &Encoder, train: &Dataset, test: &Dataset, eval: &EvalSpec) -> Result<Accuracies> {
    let tr = encoder.embed(&train.features)?;
    let te = encoder.embed(&test.features)?;
    let probe = LinearProbe::fit(&tr, &train.labels, train.n_classes, eval.probe_epochs, eval.probe_tol)?;
    probe.evaluate(&te, &test.labels, &test.aligned)
}

/// The probe on raw features, bypassing any encoder.
pub fn raw_feature_probe(train: &Dataset, test: &Dataset, eval: &EvalSpec) -> Result<Accuracies> {
    let probe = LinearProbe::fit(&train.features, &train.labels, train.n_classes, eval.probe_epochs, eval.probe_tol)?;
    probe.evaluate(&test.features, &test.labels, &test.aligned)
}

struct StepResult {
    loss: f64,
    reg: f64,
    skipped: usize,
}

fn gather_rows(data: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let f = data.n_features();
    let mut rows = Vec::with_capacity(idx.len() * f);
    for &i in idx {
        rows.extend_from_slice(data.features.row(i));
    }
    Tensor::matrix(idx.len(), f, rows)
}

fn train_step(
    encoder: &mut Encoder,
    opt: &mut Optimizer,
    data: &Dataset,
    idx: &[usize],
    settings: &TrainSettings,
    provider: &dyn BiasScoreProvider,
    lr: f64,
) -> Result<StepResult> {
    let mut g = Graph::new();
    let x = g.constant(gather_rows(data, idx)?)?;
    let params = encoder.bind(&mut g)?;
    let emb = encoder.forward(&mut g, &params, x)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let bias = match settings.regularizer.bias_mode {
        BiasMode::Discrete => BiasInfo::Discrete(idx.iter().map(|&i| data.bias[i]).collect()),
        BiasMode::Continuous => BiasInfo::Continuous(provider.scores(data, idx)),
    };
    let view = build_similarity_view(&mut g, emb, &labels, &bias, settings.loss.temperature)?;
    let obj = combined_objective(
        &mut g,
        &view,
        &settings.loss,
        &settings.regularizer,
        settings.objective.alpha,
        settings.objective.lambda,
    )?;
    let mut grads = g.backward(obj.total)?;
    let grads: Vec<Option<Tensor>> = params.iter().map(|&p: &Var| grads.take(p)).collect();
    opt.step(&mut encoder.params, &grads, lr)?;
    Ok(StepResult {
        loss: g.scalar(obj.loss),
        reg: obj.reg.map_or(0.0, |r| g.scalar(r)),
        skipped: obj.skipped_anchors,
    })
}

/// Trains an encoder on `train`, probing on `test` after each epoch.
///
/// Fails with [`Error::Diverged`] as soon as the objective or a parameter
/// becomes non-finite.
pub fn train(
    train: &Dataset,
    test: &Dataset,
    settings: &TrainSettings,
    provider: Option<&dyn BiasScoreProvider>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    settings.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("training and test sets must be nonempty".into()));
    }
    let oracle = OracleScores { softness: 0.0 };
    let provider = provider.unwrap_or(&oracle);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let spec = EncoderSpec::new(train.n_features(), &settings.model);
    let mut encoder = Encoder::init(spec, &mut rng)?;
    let mut opt = Optimizer::new(&settings.optim, &encoder.params);
    let epochs = settings.optim.epochs;
    let hist_at = histogram_epochs(epochs);
    let mut history = Vec::with_capacity(epochs);
    let mut histograms = Vec::new();
    let mut last_finite = f64::NAN;
    let diverged = |epoch: usize, last: f64| Error::Diverged {
        epoch,
        last_finite_loss: last,
    };

    for epoch in 1..=epochs {
        let start = Instant::now();
        let lr = settings.optim.lr_at(epoch - 1);
        let batches = stratified_batches(&train.labels, settings.optim.batch_size, &mut rng);
        let (mut loss, mut reg, mut skipped, mut used) = (0.0, 0.0, 0, 0usize);
        for idx in &batches {
            match train_step(&mut encoder, &mut opt, train, idx, settings, provider, lr) {
                Ok(s) => {
                    if !(s.loss + s.reg).is_finite() {
                        return Err(diverged(epoch, last_finite));
                    }
                    last_finite = s.loss + s.reg;
                    loss += s.loss;
                    reg += s.reg;
                    skipped += s.skipped;
                    used += 1;
                }
                Err(Error::DegenerateBatch(why)) => log::warn!("epoch {epoch}: batch skipped: {why}"),
                Err(Error::NonFinite { .. }) | Err(Error::ZeroNormRow { .. }) => {
                    return Err(diverged(epoch, last_finite))
                }
                Err(e) => return Err(e),
            }
        }
        if encoder.params.iter().any(|p| !p.all_finite()) {
            return Err(diverged(epoch, last_finite));
        }
        let n = used.max(1) as f64;
        let acc = if epoch % settings.eval.probe_every == 0 || epoch == epochs {
            Some(linear_probe(&encoder, train, test, &settings.eval)?)
        } else {
            None
        };
        if hist_at.contains(&epoch) {
            let e = encoder.embed(&train.features)?;
            let h = similarity_histograms(
                &e,
                train,
                settings.loss.temperature,
                settings.eval.hist_bins,
                settings.eval.hist_max_samples,
                epoch,
            )?;
            observer.on_histogram(&h)?;
            histograms.push(h);
        }
        let row = MetricsRow {
            epoch,
            loss: loss / n,
            reg: reg / n,
            skipped,
            acc,
            wall_ms: if settings.eval.record_wall_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        log::info!("{}", row.csv_line());
        observer.on_epoch(&row, &encoder)?;
        history.push(row);
    }
    Ok(TrainOutcome {
        encoder,
        history,
        histograms,
    })
}
