//! Background-colorized MNIST.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::idx::{read_idx_images, read_idx_labels};
use super::{draw_bias, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const N_COLORS: usize = 10;

/// Ten fully saturated hues, 36° apart, starting at red.
pub fn default_palette() -> Vec<[u8; 3]> {
    (0..N_COLORS)
        .map(|i| {
            let h = i as f64 * 36.0 / 60.0;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            let (r, g, b) = match h as u32 {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            let q = |v: f64| (v * 255.0).round() as u8;
            [q(r), q(g), q(b)]
        })
        .collect()
}

fn default_rho() -> f64 {
    0.995
}
fn default_test_rho() -> f64 {
    0.1
}
fn default_subset() -> usize {
    5000
}
fn default_threshold() -> u8 {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasedMnistSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    /// Without a test file the unbiased test set is held out from the
    /// training file.
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_test_rho")]
    pub test_rho: f64,
    #[serde(default = "default_palette")]
    pub palette: Vec<[u8; 3]>,
    #[serde(default = "default_subset")]
    pub subset_size: usize,
    /// Test rows to keep; all of the test file, or 2000 held-out rows.
    #[serde(default)]
    pub test_subset_size: Option<usize>,
    /// Pixels with intensity below this are background.
    #[serde(default = "default_threshold")]
    pub background_threshold: u8,
    #[serde(default)]
    pub tint_foreground: bool,
    #[serde(default)]
    pub seed: u64,
}

impl BiasedMnistSpec {
    pub fn new(train_images: PathBuf, train_labels: PathBuf) -> Self {
        Self {
            train_images,
            train_labels,
            test_images: None,
            test_labels: None,
            rho: default_rho(),
            test_rho: default_test_rho(),
            palette: default_palette(),
            subset_size: default_subset(),
            test_subset_size: None,
            background_threshold: default_threshold(),
            tint_foreground: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_palette(&self.palette)?;
        for (name, r) in [("rho", self.rho), ("test_rho", self.test_rho)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must be in (0, 1], got {r}")));
            }
        }
        if self.test_images.is_some() != self.test_labels.is_some() {
            return Err(Error::InvalidArgument("test_images and test_labels go together".into()));
        }
        if self.subset_size == 0 {
            return Err(Error::InvalidArgument("subset_size must be positive".into()));
        }
        Ok(())
    }
}

fn validate_palette(palette: &[[u8; 3]]) -> Result<()> {
    if palette.len() != N_COLORS {
        return Err(Error::InvalidArgument(format!("palette needs {N_COLORS} colors, got {}", palette.len())));
    }
    for i in 0..palette.len() {
        if palette[..i].contains(&palette[i]) {
            return Err(Error::InvalidArgument(format!("palette color {:?} repeated", palette[i])));
        }
    }
    Ok(())
}

/// Settings for one colorization pass.
#[derive(Debug, Clone)]
pub struct ColorizeParams<'a> {
    pub rho: f64,
    pub palette: &'a [[u8; 3]],
    pub background_threshold: u8,
    pub tint_foreground: bool,
    pub seed: u64,
    pub stream: u64,
}

/// Colors each image's background with its class color (probability `rho`)
/// or one of the other nine. Features are HWC RGB in `[0, 1]`; the bias
/// attribute is the color index and class `c` is designated color `c`.
pub fn colorize(pixels: &[u8], count: usize, rows: usize, cols: usize, labels: &[u8], params: &ColorizeParams) -> Result<Dataset> {
    validate_palette(params.palette)?;
    let hw = rows * cols;
    if pixels.len() != count * hw || labels.len() != count {
        return Err(Error::Idx(format!(
            "dimension mismatch: {count} images of {rows}x{cols}, {} pixel bytes, {} labels",
            pixels.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= N_COLORS) {
        return Err(Error::Idx(format!("label {l} outside 0..{N_COLORS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(params.stream);
    let mut data = Vec::with_capacity(count * hw * 3);
    let mut bias = Vec::with_capacity(count);
    for (img, &label) in pixels.chunks_exact(hw).zip(labels) {
        let c = draw_bias(&mut rng, label as usize, N_COLORS, params.rho);
        bias.push(c);
        let color = params.palette[c].map(|v| v as f64 / 255.0);
        for &p in img {
            let v = p as f64 / 255.0;
            if p < params.background_threshold {
                data.extend_from_slice(&color);
            } else if params.tint_foreground {
                data.extend(color.iter().map(|ch| ch * v));
            } else {
                data.extend_from_slice(&[v, v, v]);
            }
        }
    }
    let meta = serde_json::json!({
        "generator": "biased_mnist",
        "rho": params.rho,
        "palette": params.palette,
        "background_threshold": params.background_threshold,
        "tint_foreground": params.tint_foreground,
        "seed": params.seed,
        "rows": rows,
        "cols": cols,
    });
    Dataset::new(
        Tensor::matrix(count, hw * 3, data)?,
        labels.iter().map(|&l| l as usize).collect(),
        bias,
        N_COLORS,
        N_COLORS,
        meta,
    )
}

fn pick(pixels: &[u8], labels: &[u8], hw: usize, idx: &[usize]) -> (Vec<u8>, Vec<u8>) {
    let mut p = Vec::with_capacity(idx.len() * hw);
    for &i in idx {
        p.extend_from_slice(&pixels[i * hw..(i + 1) * hw]);
    }
    (p, idx.iter().map(|&i| labels[i]).collect())
}

/// Reads the IDX files, draws the subsets, and colorizes train at `rho` and
/// test at `test_rho`.
pub fn load_biased_mnist(spec: &BiasedMnistSpec) -> Result<Split> {
    spec.validate()?;
    let (count, rows, cols, pixels) = read_idx_images(&spec.train_images)?;
    let labels = read_idx_labels(&spec.train_labels)?;
    if labels.len() != count {
        return Err(Error::Idx(format!("dimension mismatch: {count} train images but {} labels", labels.len())));
    }
    let hw = rows * cols;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let n_train = spec.subset_size.min(count);
    let (train_idx, rest) = order.split_at(n_train);

    let (test_pixels, test_labels) = match (&spec.test_images, &spec.test_labels) {
        (Some(ti), Some(tl)) => {
            let (tc, tr, tcol, tp) = read_idx_images(ti)?;
            let tlab = read_idx_labels(tl)?;
            if tlab.len() != tc {
                return Err(Error::Idx(format!("dimension mismatch: {tc} test images but {} labels", tlab.len())));
            }
            if (tr, tcol) != (rows, cols) {
                return Err(Error::Idx(format!(
                    "dimension mismatch: train images are {rows}x{cols}, test images {tr}x{tcol}"
                )));
            }
            let mut torder: Vec<usize> = (0..tc).collect();
            torder.shuffle(&mut rng);
            torder.truncate(spec.test_subset_size.unwrap_or(tc));
            pick(&tp, &tlab, hw, &torder)
        }
        _ => {
            let n_test = spec.test_subset_size.unwrap_or(2000).min(rest.len());
            if n_test == 0 {
                return Err(Error::InvalidArgument("no rows left for a held-out test set".into()));
            }
            pick(&pixels, &labels, hw, &rest[..n_test])
        }
    };
    let (train_pixels, train_labels) = pick(&pixels, &labels, hw, train_idx);
    let base = ColorizeParams {
        rho: spec.rho,
        palette: &spec.palette,
        background_threshold: spec.background_threshold,
        tint_foreground: spec.tint_foreground,
        seed: spec.seed,
        stream: 1,
    };
    let train = colorize(&train_pixels, train_labels.len(), rows, cols, &train_labels, &base)?;
    let test = colorize(
        &test_pixels,
        test_labels.len(),
        rows,
        cols,
        &test_labels,
        &ColorizeParams {
            rho: spec.test_rho,
            stream: 2,
            ..base
        },
    )?;
    Ok(Split { train, test })
}
