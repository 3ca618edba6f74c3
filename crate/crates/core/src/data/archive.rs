//! Cached tensor archive of a built split: `data.bin` plus `manifest.json`
//! recording the dataset name, seeds, counts and a SHA-256 checksum.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetKind, DatasetSplit};
use crate::error::{Error, Result};

const DATA_FILE: &str = "data.bin";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub dataset: DatasetKind,
    pub split_seed: u64,
    pub pairing_seed: Option<u64>,
    pub height: usize,
    pub width: usize,
    pub counts: PartCounts,
    /// Hex SHA-256 of `data.bin`.
    pub checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// Per part: pixels, labels (u8), annotation bits (u16 LE), digit pairs (2 x u8).
fn encode_part(part: &Dataset, out: &mut Vec<u8>) {
    out.extend_from_slice(part.raw_pixels());
    out.extend(part.labels().iter().map(|&y| y as u8));
    if let Some(bits) = part.annotation_bits() {
        for b in bits {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    if let Some(pairs) = part.digit_pairs() {
        out.extend(pairs.iter().flatten());
    }
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = *at + n;
    let slice = bytes
        .get(*at..end)
        .ok_or_else(|| Error::data("archive payload is shorter than its manifest"))?;
    *at = end;
    Ok(slice)
}

fn decode_part(
    bytes: &[u8],
    at: &mut usize,
    m: &ArchiveManifest,
    name: &str,
    n: usize,
) -> Result<Dataset> {
    let pixels = take(bytes, at, n * m.height * m.width)?.to_vec();
    let labels = take(bytes, at, n)?.iter().map(|&y| y as usize).collect();
    let bits = take(bytes, at, 2 * n)?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let pairs = match m.dataset {
        DatasetKind::MnistAddition => Some(
            take(bytes, at, 2 * n)?
                .chunks_exact(2)
                .map(|c| [c[0], c[1]])
                .collect(),
        ),
        DatasetKind::MnistEvenOdd => None,
    };
    Dataset::new(
        m.dataset,
        name,
        (m.height, m.width),
        pixels,
        labels,
        Some(bits),
        pairs,
    )
}

pub fn write_archive(split: &DatasetSplit, dir: &Path) -> Result<ArchiveManifest> {
    if [&split.train, &split.validation, &split.test]
        .iter()
        .any(|p| p.annotation_bits().is_none())
    {
        return Err(Error::data("only annotated splits can be archived"));
    }
    fs::create_dir_all(dir)?;
    let mut payload = Vec::new();
    for part in [&split.train, &split.validation, &split.test] {
        encode_part(part, &mut payload);
    }
    let (height, width) = split.train.hw();
    let manifest = ArchiveManifest {
        dataset: split.kind,
        split_seed: split.split_seed,
        pairing_seed: split.pairing_seed,
        height,
        width,
        counts: PartCounts {
            train: split.train.len(),
            validation: split.validation.len(),
            test: split.test.len(),
        },
        checksum: hex(&Sha256::digest(&payload)),
    };
    fs::write(dir.join(DATA_FILE), &payload)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<ArchiveManifest> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
}

/// Loads an archive, verifying the checksum before decoding.
pub fn read_archive(dir: &Path) -> Result<DatasetSplit> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(DATA_FILE);
    let payload = fs::read(&path)?;
    if hex(&Sha256::digest(&payload)) != manifest.checksum {
        return Err(Error::Ingest {
            path,
            reason: "checksum mismatch".into(),
        });
    }
    let mut at = 0;
    let c = manifest.counts;
    let train = decode_part(&payload, &mut at, &manifest, "train", c.train)?;
    let validation = decode_part(&payload, &mut at, &manifest, "validation", c.validation)?;
    let test = decode_part(&payload, &mut at, &manifest, "test", c.test)?;
    if at != payload.len() {
        return Err(Error::data("archive payload has trailing bytes"));
    }
    Ok(DatasetSplit {
        kind: manifest.dataset,
        train,
        validation,
        test,
        split_seed: manifest.split_seed,
        pairing_seed: manifest.pairing_seed,
    })
}

/// Reads the archive at `dir` when its seeds match, otherwise builds the
/// split with `build` and writes it.
pub fn cached(
    dir: &Path,
    kind: DatasetKind,
    split_seed: u64,
    pairing_seed: Option<u64>,
    build: impl FnOnce() -> Result<DatasetSplit>,
) -> Result<DatasetSplit> {
    if let Ok(m) = read_manifest(dir) {
        if m.dataset == kind && m.split_seed == split_seed && m.pairing_seed == pairing_seed {
            match read_archive(dir) {
                Ok(split) => return Ok(split),
                Err(e) => log::warn!("ignoring cached archive at {}: {e}", dir.display()),
            }
        }
    }
    let split = build()?;
    write_archive(&split, dir)?;
    Ok(split)
}
