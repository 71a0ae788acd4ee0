//! On-disk dataset formats.
//!
//! Binary (`.emds`): magic `EMDS`, `u32` version, `u32` header length, JSON
//! header, `u64` rows, `u32` features, then per row the features as `f64`,
//! `u32` label, `u32` bias attribute and a `u8` aligned flag. All integers and
//! floats are little-endian.
//!
//! CSV: a `# ` line carrying the same JSON header, a column header
//! `f0,…,label,bias_attr,aligned`, then one line per row.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EMDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    #[default]
    Binary,
    Csv,
}

impl DatasetFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DatasetFormat::Binary => "emds",
            DatasetFormat::Csv => "csv",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    n_classes: usize,
    n_bias_values: usize,
    meta: serde_json::Value,
}

fn bad_data(msg: impl Into<String>) -> Error {
    Error::Io(io::Error::new(io::ErrorKind::InvalidData, msg.into()))
}

fn header_json(d: &Dataset) -> Result<String> {
    serde_json::to_string(&Header {
        n_classes: d.n_classes,
        n_bias_values: d.n_bias_values,
        meta: d.meta.clone(),
    })
    .map_err(|e| bad_data(e.to_string()))
}

pub fn write_dataset(path: &Path, d: &Dataset, format: DatasetFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = header_json(d)?;
    match format {
        DatasetFormat::Binary => {
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u32).to_le_bytes())?;
            w.write_all(header.as_bytes())?;
            w.write_all(&(d.len() as u64).to_le_bytes())?;
            w.write_all(&(d.n_features() as u32).to_le_bytes())?;
            for i in 0..d.len() {
                for v in d.features.row(i) {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(&(d.labels[i] as u32).to_le_bytes())?;
                w.write_all(&(d.bias[i] as u32).to_le_bytes())?;
                w.write_all(&[d.aligned[i] as u8])?;
            }
        }
        DatasetFormat::Csv => {
            writeln!(w, "# {header}")?;
            let cols: Vec<String> = (0..d.n_features()).map(|j| format!("f{j}")).collect();
            writeln!(w, "{},label,bias_attr,aligned", cols.join(","))?;
            for i in 0..d.len() {
                for v in d.features.row(i) {
                    write!(w, "{v},")?;
                }
                writeln!(w, "{},{},{}", d.labels[i], d.bias[i], d.aligned[i] as u8)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn finish(h: Header, n: usize, f: usize, data: Vec<f64>, labels: Vec<usize>, bias: Vec<usize>, aligned: Vec<bool>) -> Result<Dataset> {
    let d = Dataset::new(Tensor::matrix(n, f, data)?, labels, bias, h.n_classes, h.n_bias_values, h.meta)
        .map_err(|e| bad_data(e.to_string()))?;
    if d.aligned != aligned {
        return Err(bad_data("stored aligned flags disagree with labels and bias attributes"));
    }
    Ok(d)
}

/// Reads either format, chosen by the file's first bytes.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic == MAGIC {
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad_data(format!("unsupported dataset version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        let mut hb = vec![0; len];
        r.read_exact(&mut hb)?;
        let h: Header = serde_json::from_slice(&hb).map_err(|e| bad_data(e.to_string()))?;
        let mut nb = [0; 8];
        r.read_exact(&mut nb)?;
        let n = u64::from_le_bytes(nb) as usize;
        let f = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(n * f);
        let (mut labels, mut bias, mut aligned) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let mut row = vec![0u8; f * 8 + 9];
        for _ in 0..n {
            r.read_exact(&mut row)?;
            data.extend(row[..f * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
            labels.push(u32::from_le_bytes(row[f * 8..f * 8 + 4].try_into().unwrap()) as usize);
            bias.push(u32::from_le_bytes(row[f * 8 + 4..f * 8 + 8].try_into().unwrap()) as usize);
            aligned.push(row[f * 8 + 8] != 0);
        }
        return finish(h, n, f, data, labels, bias, aligned);
    }
    if &magic[..2] != b"# " {
        return Err(bad_data(format!("{}: not a dataset file", path.display())));
    }
    let mut first = String::new();
    r.read_line(&mut first)?;
    let json = format!("{}{}", String::from_utf8_lossy(&magic[2..]), first.trim_end());
    let h: Header = serde_json::from_str(&json).map_err(|e| bad_data(e.to_string()))?;
    let mut lines = r.lines();
    let cols = lines.next().ok_or_else(|| bad_data("missing column header"))??;
    let f = cols.split(',').count().checked_sub(3).ok_or_else(|| bad_data("short column header"))?;
    let (mut data, mut labels, mut bias, mut aligned) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let parse_err = |line: usize| bad_data(format!("{}: bad value on data line {line}", path.display()));
    for (k, line) in lines.enumerate() {
        let line = line?;
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != f + 3 {
            return Err(bad_data(format!("data line {k} has {} fields, expected {}", parts.len(), f + 3)));
        }
        for p in &parts[..f] {
            data.push(p.parse::<f64>().map_err(|_| parse_err(k))?);
        }
        labels.push(parts[f].parse().map_err(|_| parse_err(k))?);
        bias.push(parts[f + 1].parse().map_err(|_| parse_err(k))?);
        aligned.push(parts[f + 2] == "1");
    }
    let n = labels.len();
    finish(h, n, f, data, labels, bias, aligned)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub split: String,
    pub file: String,
    pub rows: usize,
    pub features: usize,
    pub aligned: usize,
    pub conflicting: usize,
    pub seed: u64,
}

impl ManifestRow {
    pub fn describe(split: &str, file: &str, d: &Dataset, seed: u64) -> Self {
        Self {
            split: split.to_string(),
            file: file.to_string(),
            rows: d.len(),
            features: d.n_features(),
            aligned: d.aligned_count(),
            conflicting: d.conflicting_count(),
            seed,
        }
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "split,file,rows,features,aligned,conflicting,seed")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.split, r.file, r.rows, r.features, r.aligned, r.conflicting, r.seed
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_biased_blobs, BlobSpec};

    fn small() -> Dataset {
        gen_biased_blobs(&BlobSpec {
            n_classes: 3,
            dim_signal: 2,
            dim_bias: 2,
            rho: 0.8,
            n_train: 30,
            n_test: 3,
            ..Default::default()
        })
        .unwrap()
        .train
    }

    #[test]
    fn both_formats_round_trip_exactly() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        for fmt in [DatasetFormat::Binary, DatasetFormat::Csv] {
            let p = dir.path().join(format!("d.{}", fmt.extension()));
            write_dataset(&p, &d, fmt).unwrap();
            assert_eq!(read_dataset(&p).unwrap(), d, "{fmt:?}");
        }
    }

    #[test]
    fn rewriting_is_byte_identical() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_dataset(&a, &d, DatasetFormat::Binary).unwrap();
        write_dataset(&b, &small(), DatasetFormat::Binary).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"hello world").unwrap();
        assert!(read_dataset(&p).is_err());
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EMDS");
        bytes.extend_from_slice(&7u32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(read_dataset(&p).is_err());
    }

    #[test]
    fn manifest_layout() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        write_manifest(&p, &[ManifestRow::describe("train", "train.emds", &d, 4)]).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "split,file,rows,features,aligned,conflicting,seed");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "train");
        assert_eq!(row[2], "30");
        assert_eq!(row[4].parse::<usize>().unwrap() + row[5].parse::<usize>().unwrap(), 30);
    }
}
