//! Reader for the IDX files MNIST ships in.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images stored row-major as `n * rows * cols` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn ingest(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Picks `stem` or `stem.gz` under `root`, whichever exists.
pub fn locate(root: &Path, stem: &str) -> Result<PathBuf> {
    let plain = root.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = root.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(ingest(&plain, "file not found (also tried .gz)"))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| ingest(path, e.to_string()))?;
    let mut bytes = Vec::new();
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        GzDecoder::new(file).read_to_end(&mut bytes)
    } else {
        file.read_to_end(&mut bytes)
    };
    res.map_err(|e| ingest(path, e.to_string()))?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn parse_header(path: &Path, bytes: &[u8], magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(ingest(path, "truncated header"));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(ingest(
            path,
            format!("bad magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| be_u32(bytes, 4 + 4 * i) as usize)
        .collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(ingest(
            path,
            format!(
                "payload holds {} bytes, header implies {expected}",
                bytes.len()
            ),
        ));
    }
    Ok(dims)
}

pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<IdxImages> {
    let dims = parse_header(path, bytes, IMAGES_MAGIC, 3)?;
    Ok(IdxImages {
        count: dims[0],
        rows: dims[1],
        cols: dims[2],
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    parse_header(path, bytes, LABELS_MAGIC, 1)?;
    Ok(bytes[8..].to_vec())
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    parse_images(path, &read_all(path)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    parse_labels(path, &read_all(path)?)
}

#[cfg(test)]
pub(crate) fn encode_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [count, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
pub(crate) fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
