use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{BiasedMnistSpec, BlobSpec, DatasetFormat};
use crate::error::{Error, Result};
use crate::fairkl::RegularizerConfig;
use crate::losses::LossConfig;
use crate::train::{EvalSpec, ModelSpec, ObjectiveSpec, OptimSpec, TrainSettings};

use super::presets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Blobs,
    BiasedMnist,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub format: DatasetFormat,
    pub blobs: BlobSpec,
    /// Required when `kind = "biased_mnist"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub biased_mnist: Option<BiasedMnistSpec>,
}

/// Grid for `sweep`; an empty list keeps the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub epsilon: Vec<f64>,
    pub alpha: Vec<f64>,
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
    pub seeds: Vec<u64>,
    pub workers: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            epsilon: Vec::new(),
            alpha: Vec::new(),
            lambda: Vec::new(),
            rho: Vec::new(),
            seeds: vec![0, 1, 2],
            workers: 4,
        }
    }
}

/// One experiment, as read from a TOML file.
///
/// The top-level `seed` drives both data generation and training; any
/// `seed` inside a dataset section is replaced by it on resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub loss: LossConfig,
    pub regularizer: RegularizerConfig,
    pub objective: ObjectiveSpec,
    pub optim: OptimSpec,
    pub eval: EvalSpec,
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ModelSpec::default(),
            loss: LossConfig::default(),
            regularizer: RegularizerConfig::default(),
            objective: ObjectiveSpec::default(),
            optim: OptimSpec::default(),
            eval: EvalSpec::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `preset:NAME` from the bundled presets, anything else from disk.
    pub fn load(source: &str) -> Result<Self> {
        if let Some(name) = source.strip_prefix("preset:") {
            let text = presets::get(name).ok_or_else(|| {
                Error::Config(format!("unknown preset {name:?}; available: {}", presets::names().join(", ")))
            })?;
            return Self::from_toml_str(text);
        }
        let text = std::fs::read_to_string(Path::new(source))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.resolve();
    }

    fn resolve(&mut self) {
        self.dataset.blobs.seed = self.seed;
        if let Some(m) = self.dataset.biased_mnist.as_mut() {
            m.seed = self.seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        match self.dataset.kind {
            DatasetKind::Blobs => self.dataset.blobs.validate().map_err(cfg_err)?,
            DatasetKind::BiasedMnist => match &self.dataset.biased_mnist {
                Some(m) => m.validate().map_err(cfg_err)?,
                None => return Err(Error::Config("kind = \"biased_mnist\" needs a [dataset.biased_mnist] section".into())),
            },
        }
        self.settings().validate().map_err(cfg_err)?;
        let s = &self.sweep;
        if s.workers == 0 {
            return Err(Error::Config("sweep.workers must be >= 1".into()));
        }
        if s.seeds.is_empty() {
            return Err(Error::Config("sweep.seeds must not be empty".into()));
        }
        if s.epsilon.iter().chain(&s.alpha).chain(&s.lambda).chain(&s.rho).any(|v| !v.is_finite()) {
            return Err(Error::Config("sweep values must be finite".into()));
        }
        Ok(())
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            model: self.model.clone(),
            optim: self.optim.clone(),
            loss: self.loss,
            regularizer: self.regularizer,
            objective: self.objective,
            eval: self.eval.clone(),
            seed: self.seed,
        }
    }

    /// Training correlation of the configured dataset.
    pub fn rho(&self) -> f64 {
        match (self.dataset.kind, &self.dataset.biased_mnist) {
            (DatasetKind::BiasedMnist, Some(m)) => m.rho,
            _ => self.dataset.blobs.rho,
        }
    }

    pub fn set_rho(&mut self, rho: f64) {
        match (self.dataset.kind, self.dataset.biased_mnist.as_mut()) {
            (DatasetKind::BiasedMnist, Some(m)) => m.rho = rho,
            _ => self.dataset.blobs.rho = rho,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[loss]\nepsilon = 0.1\nmargin = 2", "[dataset.blobs]\nrows = 3"] {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err:?}");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.loss.epsilon = 0.25;
        cfg.set_seed(7);
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.dataset.blobs.seed, 7);
    }

    #[test]
    fn mnist_requires_paths() {
        let err = ExperimentConfig::from_toml_str("[dataset]\nkind = \"biased_mnist\"").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err =
            ExperimentConfig::from_toml_str("[dataset]\nkind = \"biased_mnist\"\n[dataset.biased_mnist]\nrho = 0.9").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["[objective]\nalpha = 0.0", "[loss]\ntemperature = -1.0", "[optim]\nbatch_size = 2", "[sweep]\nworkers = 0"] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn every_preset_parses() {
        for name in presets::names() {
            let cfg = ExperimentConfig::load(&format!("preset:{name}")).unwrap();
            assert!(cfg.output_dir.ends_with(name), "{name}");
        }
        assert!(ExperimentConfig::load("preset:nope").is_err());
    }
}
