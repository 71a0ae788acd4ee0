use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::datagen::{gen_biased_blobs, load_biased_mnist, write_dataset, write_manifest, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::fairkl::BiasMode;
use crate::oracles::{self, OracleReport, SuiteOptions};
use crate::train::{
    self, linear_probe, similarity_histograms, Accuracies, Encoder, EncoderSpec, MetricsRow, SimilarityHistogram,
    TrainObserver, METRICS_HEADER,
};

use super::config::{DatasetKind, ExperimentConfig};

pub const SUMMARY_ECHO: &str = "dataset,variant,epsilon,temperature,regularizer,bias_mode,alpha,lambda,rho,seed,epochs";

const MODEL_MAGIC: &[u8; 8] = b"EPSMODEL";
const MODEL_VERSION: u32 = 1;

/// Generates (or loads and colorizes) the configured train and test splits.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Split> {
    match cfg.dataset.kind {
        DatasetKind::Blobs => gen_biased_blobs(&cfg.dataset.blobs),
        DatasetKind::BiasedMnist => {
            let spec = cfg
                .dataset
                .biased_mnist
                .as_ref()
                .ok_or_else(|| Error::Config("missing [dataset.biased_mnist]".into()))?;
            load_biased_mnist(spec)
        }
    }
}

/// Writes `train.*`, `test.*` and `manifest.csv` into `dir`.
pub fn gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<ManifestRow>> {
    let split = load_data(cfg)?;
    fs::create_dir_all(dir)?;
    let ext = cfg.dataset.format.extension();
    let mut rows = Vec::new();
    for (name, d) in [("train", &split.train), ("test", &split.test)] {
        let file = format!("{name}.{ext}");
        write_dataset(&dir.join(&file), d, cfg.dataset.format)?;
        rows.push(ManifestRow::describe(name, &file, d, cfg.seed));
    }
    write_manifest(&dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub final_row: MetricsRow,
    pub history: Vec<MetricsRow>,
}

impl RunSummary {
    pub fn accuracy(&self) -> Accuracies {
        self.final_row.acc.expect("the last epoch is always probed")
    }
}

struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl TrainObserver for RunWriter {
    fn on_epoch(&mut self, row: &MetricsRow, _encoder: &Encoder) -> Result<()> {
        writeln!(self.metrics, "{}", row.csv_line())?;
        self.metrics.flush()?;
        Ok(())
    }

    fn on_histogram(&mut self, hist: &SimilarityHistogram) -> Result<()> {
        hist.write_csv(&self.dir.join(format!("hist_epoch{}.csv", hist.epoch)))
    }
}

fn summary_echo(cfg: &ExperimentConfig) -> String {
    let dataset = match cfg.dataset.kind {
        DatasetKind::Blobs => "blobs",
        DatasetKind::BiasedMnist => "biased_mnist",
    };
    let mode = match cfg.regularizer.bias_mode {
        BiasMode::Discrete => "discrete",
        BiasMode::Continuous => "continuous",
    };
    format!(
        "{dataset},{},{},{},{},{mode},{},{},{},{},{}",
        cfg.loss.variant.as_str(),
        cfg.loss.epsilon,
        cfg.loss.temperature,
        oracles::kind_name(cfg.regularizer.kind),
        cfg.objective.alpha,
        cfg.objective.lambda,
        cfg.rho(),
        cfg.seed,
        cfg.optim.epochs
    )
}

/// Trains one configuration and writes every run artifact into `dir`.
///
/// On divergence a `FAILED` marker holding the last finite loss is written
/// and the error is returned.
pub fn run_train(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let split = load_data(cfg)?;
    fs::create_dir_all(dir)?;
    let failed = dir.join("FAILED");
    if failed.exists() {
        fs::remove_file(&failed)?;
    }
    fs::write(dir.join("config.resolved.toml"), cfg.to_toml()?)?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut writer = RunWriter {
        dir: dir.to_path_buf(),
        metrics,
    };
    let outcome = match train::train(&split.train, &split.test, &cfg.settings(), None, &mut writer) {
        Ok(o) => o,
        Err(Error::Diverged { epoch, last_finite_loss }) => {
            fs::write(&failed, format!("diverged at epoch {epoch}\nlast_finite_loss={last_finite_loss}\n"))?;
            return Err(Error::Diverged { epoch, last_finite_loss });
        }
        Err(e) => return Err(e),
    };
    write_model(&dir.join("model.bin"), &outcome.encoder)?;
    let last = *outcome.history.last().expect("at least one epoch");
    fs::write(
        dir.join("summary.csv"),
        format!("{METRICS_HEADER},{SUMMARY_ECHO}\n{},{}\n", last.csv_line(), summary_echo(cfg)),
    )?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        final_row: last,
        history: outcome.history,
    })
}

/// Magic, version, JSON spec header, parameter count, then little-endian
/// `f64` parameters.
pub fn write_model(path: &Path, enc: &Encoder) -> Result<()> {
    let header = serde_json::to_vec(&enc.spec).map_err(|e| Error::Io(e.into()))?;
    let flat = enc.flat_params();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(flat.len() as u64).to_le_bytes())?;
    for v in flat {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<Encoder> {
    let bad = |m: &str| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {m}", path.display())));
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated model file"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MODEL_MAGIC {
        return Err(bad("not a model file"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != MODEL_VERSION {
        return Err(bad(&format!("unsupported model version {version}")));
    }
    let hlen = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let spec: EncoderSpec = serde_json::from_slice(take(hlen)?).map_err(|e| bad(&e.to_string()))?;
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    if count != spec.param_count() {
        return Err(bad(&format!("header says {} parameters, file holds {count}", spec.param_count())));
    }
    let raw = take(count.checked_mul(8).ok_or_else(|| bad("parameter count overflow"))?)?;
    let flat: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Encoder::from_flat(spec, &flat)
}

fn check_input_dim(enc: &Encoder, split: &Split) -> Result<()> {
    if enc.spec.input_dim != split.train.n_features() {
        return Err(Error::Config(format!(
            "model expects {} input features, dataset has {}",
            enc.spec.input_dim,
            split.train.n_features()
        )));
    }
    Ok(())
}

/// Probes a saved encoder on the configured data.
pub fn run_probe(cfg: &ExperimentConfig, model: &Path) -> Result<Accuracies> {
    let enc = read_model(model)?;
    let split = load_data(cfg)?;
    check_input_dim(&enc, &split)?;
    linear_probe(&enc, &split.train, &split.test, &cfg.eval)
}

/// Histograms a saved encoder's training-set similarities into `out`.
pub fn run_hist(cfg: &ExperimentConfig, model: &Path, out: &Path) -> Result<SimilarityHistogram> {
    let enc = read_model(model)?;
    let split = load_data(cfg)?;
    check_input_dim(&enc, &split)?;
    let emb = enc.embed(&split.train.features)?;
    let h = similarity_histograms(
        &emb,
        &split.train,
        cfg.loss.temperature,
        cfg.eval.hist_bins,
        cfg.eval.hist_max_samples,
        cfg.optim.epochs,
    )?;
    h.write_csv(out)?;
    Ok(h)
}

/// Runs the oracle suite and writes `oracle_report.csv` into `dir`.
pub fn run_verify(opts: &SuiteOptions, dir: &Path) -> Result<Vec<OracleReport>> {
    let reports = oracles::run_suite(opts)?;
    fs::create_dir_all(dir)?;
    oracles::write_report(&dir.join("oracle_report.csv"), &reports)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::read_dataset;
    use crate::train::ModelSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.blobs.n_classes = 3;
        cfg.dataset.blobs.dim_signal = 3;
        cfg.dataset.blobs.dim_bias = 3;
        cfg.dataset.blobs.n_train = 120;
        cfg.dataset.blobs.n_test = 60;
        cfg.model = ModelSpec { hidden: vec![8], embedding_dim: 4 };
        cfg.optim.epochs = 3;
        cfg.optim.batch_size = 32;
        cfg.eval.probe_epochs = 50;
        cfg.objective.lambda = 0.5;
        cfg
    }

    #[test]
    fn train_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let s = run_train(&tiny_config(), dir.path()).unwrap();
        for f in ["config.resolved.toml", "metrics.csv", "summary.csv", "model.bin", "hist_epoch1.csv", "hist_epoch2.csv", "hist_epoch3.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 4);
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines[0], format!("{METRICS_HEADER},{SUMMARY_ECHO}"));
        assert!(lines[1].starts_with(metrics.lines().last().unwrap()));
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        let back = ExperimentConfig::from_toml_str(&fs::read_to_string(dir.path().join("config.resolved.toml")).unwrap()).unwrap();
        assert_eq!(back, tiny_config());
        assert_eq!(s.history.len(), 3);
    }

    #[test]
    fn model_round_trip_and_probe() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let s = run_train(&cfg, dir.path()).unwrap();
        let acc = run_probe(&cfg, &dir.path().join("model.bin")).unwrap();
        assert_eq!(acc, s.accuracy());
        let h = run_hist(&cfg, &dir.path().join("model.bin"), &dir.path().join("h.csv")).unwrap();
        assert_eq!(h.total(), 3 * (40 * 39 / 2));
    }

    #[test]
    fn model_file_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let spec = EncoderSpec::new(3, &ModelSpec { hidden: vec![2], embedding_dim: 2 });
        let enc = Encoder::init(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        write_model(&p, &enc).unwrap();
        assert_eq!(read_model(&p).unwrap(), enc);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_model(&p), Err(Error::Io(_))));
        fs::write(&p, b"garbage").unwrap();
        assert!(matches!(read_model(&p), Err(Error::Io(_))));
    }

    #[test]
    fn gen_data_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = tiny_config();
        let rows = gen_data(&cfg, a.path()).unwrap();
        gen_data(&cfg, b.path()).unwrap();
        assert_eq!(rows.len(), 2);
        for f in ["train.emds", "test.emds", "manifest.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let train = read_dataset(&a.path().join("train.emds")).unwrap();
        assert_eq!(train.len(), 120);
        assert_eq!(rows[0].aligned + rows[0].conflicting, 120);
    }

    #[test]
    fn divergence_leaves_a_marker() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.optim.lr = 1e300;
        cfg.optim.algorithm = crate::train::Algorithm::SgdMomentum;
        let err = run_train(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
        let marker = fs::read_to_string(dir.path().join("FAILED")).unwrap();
        assert!(marker.contains("last_finite_loss="));
    }
}
