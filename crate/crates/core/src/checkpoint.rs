//! On-disk model snapshots.
//!
//! A checkpoint is a directory holding:
//! - `config.json`: the full [`ModelConfig`];
//! - `weights.bin`: every parameter as little-endian `f32`, back to back;
//! - `manifest.json`: tensor name, shape and byte offset into `weights.bin`;
//! - `meta.json`: epoch, seed and a metric snapshot.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Lcbm;
use crate::nn::Real;

const CONFIG_FILE: &str = "config.json";
const WEIGHTS_FILE: &str = "weights.bin";
const MANIFEST_FILE: &str = "manifest.json";
const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Number of completed epochs when the snapshot was taken.
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    byte_len: usize,
    tensors: Vec<TensorEntry>,
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

/// Writes `model` and `meta` into `dir`, creating it if needed.
pub fn save_checkpoint<F: Real>(model: &Lcbm<F>, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_context(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut snapshot = model.clone();
    snapshot.visit_params(&mut |name, slot| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: slot.shape.clone(),
            offset: blob.len(),
        });
        for v in slot.value.iter() {
            blob.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    });
    let manifest = Manifest {
        dtype: "f32le".into(),
        byte_len: blob.len(),
        tensors,
    };
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| io_context(&path, e))
    };
    write(CONFIG_FILE, &serde_json::to_vec_pretty(model.config())?)?;
    write(WEIGHTS_FILE, &blob)?;
    write(MANIFEST_FILE, &serde_json::to_vec_pretty(&manifest)?)?;
    write(META_FILE, &serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| io_context(&path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Reads only the configuration of a checkpoint.
pub fn load_config(dir: &Path) -> Result<ModelConfig> {
    read_json(dir, CONFIG_FILE)
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    read_json(dir, META_FILE)
}

/// Rebuilds a model from `dir`, checking every stored shape against the config.
pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<(Lcbm<F>, CheckpointMeta)> {
    let config = load_config(dir)?;
    let mut model = Lcbm::<F>::new(config)?;
    fill_from(&mut model, dir)?;
    Ok((model, load_meta(dir)?))
}

/// Overwrites the parameters of an already constructed model from `dir`.
///
/// Used for models with an external backbone, which cannot be rebuilt from
/// the config alone.
pub fn fill_from<F: Real>(model: &mut Lcbm<F>, dir: &Path) -> Result<()> {
    let manifest: Manifest = read_json(dir, MANIFEST_FILE)?;
    if manifest.dtype != "f32le" {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype {}",
            manifest.dtype
        )));
    }
    let path = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&path).map_err(|e| io_context(&path, e))?;
    if blob.len() != manifest.byte_len {
        return Err(Error::Checkpoint(format!(
            "weights.bin holds {} bytes, manifest expects {}",
            blob.len(),
            manifest.byte_len
        )));
    }
    let expected = model.param_shapes();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} in manifest does not match model tensor {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let end = entry.offset + 4 * shape.iter().product::<usize>();
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} runs past the end of weights.bin"
            )));
        }
    }
    let mut entries = manifest.tensors.iter();
    model.visit_params(&mut |_, slot| {
        let entry = entries.next().expect("validated above");
        let bytes = &blob[entry.offset..entry.offset + 4 * slot.value.len()];
        for (v, chunk) in slot.value.iter_mut().zip(bytes.chunks_exact(4)) {
            let x = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            *v = F::lit(f64::from(x));
        }
    });
    let bad = model.non_finite_params();
    if !bad.is_empty() {
        return Err(Error::Checkpoint(format!(
            "non-finite values in {}",
            bad.join(", ")
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use ndarray::Array4;

    #[test]
    fn round_trip_reproduces_class_scores() {
        let mut cfg = ModelConfig::tiny();
        cfg.seed = 11;
        let model = Lcbm::<f32>::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta {
            epoch: 3,
            seed: 11,
            metrics: [("val_accuracy".to_string(), 0.5)].into(),
        };
        save_checkpoint(&model, &meta, dir.path()).unwrap();
        let (loaded, meta2) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(meta, meta2);
        let x = Array4::from_shape_fn((2, 3, 8, 8), |(b, c, h, w)| {
            ((b + c * h + w) % 7) as f32 / 7.0
        });
        let a = model.forward(x.view(), Mode::Eval, None).unwrap();
        let b = loaded.forward(x.view(), Mode::Eval, None).unwrap();
        assert_eq!(a.prediction.class_scores, b.prediction.class_scores);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let model = Lcbm::<f32>::new(ModelConfig::tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &CheckpointMeta::default(), dir.path()).unwrap();
        let mut other = ModelConfig::tiny();
        other.embedding_dim = 5;
        fs::write(
            dir.path().join(CONFIG_FILE),
            serde_json::to_vec(&other).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(dir.path()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let model = Lcbm::<f32>::new(ModelConfig::tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &CheckpointMeta::default(), dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint::<f32>(dir.path()).is_err());
    }

    #[test]
    fn missing_directory_is_a_checkpoint_error() {
        let err = load_checkpoint::<f32>(Path::new("/nonexistent/ckpt")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
