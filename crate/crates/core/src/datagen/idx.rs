//! The IDX container used by the MNIST distribution (big-endian).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxData {
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        /// `count · rows · cols` bytes, image-major, row-major.
        pixels: Vec<u8>,
    },
    Labels {
        labels: Vec<u8>,
    },
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("truncated header: need {} bytes, file has {}", at + 4, bytes.len())))
}

fn body(bytes: &[u8], header: usize, expected: usize) -> Result<Vec<u8>> {
    let have = bytes.len() - header;
    if have < expected {
        return Err(Error::Idx(format!("truncated file: header declares {expected} data bytes, found {have}")));
    }
    if have > expected {
        return Err(Error::Idx(format!(
            "dimension mismatch: header declares {expected} data bytes, found {have}"
        )));
    }
    Ok(bytes[header..].to_vec())
}

/// Parses an in-memory IDX image (magic `0x803`) or label (magic `0x801`) file.
pub fn parse_idx_bytes(bytes: &[u8]) -> Result<IdxData> {
    let magic = be_u32(bytes, 0)?;
    match magic {
        IMAGES_MAGIC => {
            let count = be_u32(bytes, 4)? as usize;
            let rows = be_u32(bytes, 8)? as usize;
            let cols = be_u32(bytes, 12)? as usize;
            let pixels = body(bytes, 16, count * rows * cols)?;
            Ok(IdxData::Images {
                count,
                rows,
                cols,
                pixels,
            })
        }
        LABELS_MAGIC => {
            let count = be_u32(bytes, 4)? as usize;
            let labels = body(bytes, 8, count)?;
            Ok(IdxData::Labels { labels })
        }
        other => Err(Error::Idx(format!(
            "bad magic: expected 0x{IMAGES_MAGIC:08x} (images) or 0x{LABELS_MAGIC:08x} (labels), got 0x{other:08x}"
        ))),
    }
}

pub fn parse_idx(path: &Path) -> Result<IdxData> {
    let bytes = fs::read(path)?;
    parse_idx_bytes(&bytes).map_err(|e| match e {
        Error::Idx(m) => Error::Idx(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Reads an image file, rejecting label files. Returns `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    match parse_idx(path)? {
        IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } => Ok((count, rows, cols, pixels)),
        IdxData::Labels { .. } => Err(Error::Idx(format!(
            "{}: bad magic: expected 0x{IMAGES_MAGIC:08x} (images), got 0x{LABELS_MAGIC:08x}",
            path.display()
        ))),
    }
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    match parse_idx(path)? {
        IdxData::Labels { labels } => Ok(labels),
        IdxData::Images { .. } => Err(Error::Idx(format!(
            "{}: bad magic: expected 0x{LABELS_MAGIC:08x} (labels), got 0x{IMAGES_MAGIC:08x}",
            path.display()
        ))),
    }
}

pub fn write_idx_images(path: &Path, count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != count * rows * cols {
        return Err(Error::Idx(format!(
            "dimension mismatch: {count}x{rows}x{cols} needs {} bytes, got {}",
            count * rows * cols,
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}
