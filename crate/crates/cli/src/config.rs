//! Run configuration: one YAML file holding the dataset choice, model and
//! training hyperparameters and output paths. Every field can be overridden
//! from the command line with `--set dotted.key=value`.
//!
//! Missing model and training fields fall back to the dataset's defaults, and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use lcbm_core::data::{default_data_root, DatasetKind};
use lcbm_core::train::SeedPlan;
use lcbm_core::{Error, ModelConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};

pub const EFFECTIVE_CONFIG: &str = "config.effective.yaml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub dataset: DatasetKind,
    /// Directory with the MNIST IDX files; `LCBM_DATA_ROOT` or `data/mnist` when absent.
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    /// Where built datasets are cached between runs.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub run_dir: PathBuf,
    /// Run seed; model initialization, shuffling, noise, split and pairing derive from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfigFile {
    pub fn data_root(&self) -> PathBuf {
        self.data_root.clone().unwrap_or_else(default_data_root)
    }

    pub fn seeds(&self) -> SeedPlan {
        SeedPlan::new(self.seed)
    }

    pub fn to_yaml(&self) -> Result<String> {
        serde_yaml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Parses YAML text, applies `key=value` overrides and fills defaults.
    pub fn from_yaml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = if text.trim().is_empty() {
            Value::Mapping(Mapping::new())
        } else {
            serde_yaml::from_str(text)
                .map_err(|e| Error::config(format!("config is not valid YAML: {e}")))?
        };
        if !doc.is_mapping() {
            return Err(Error::config("config must be a mapping"));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        normalize_model_aliases(&mut doc)?;
        let explicit_model_seed = lookup(&doc, &["model", "seed"]).is_some();
        let explicit_train_seed = lookup(&doc, &["train", "seed"]).is_some();
        let explicit_ckpt_dir = lookup(&doc, &["train", "checkpoint_dir"]).is_some();

        let kind: DatasetKind = match lookup(&doc, &["dataset"]) {
            Some(v) => serde_yaml::from_value(v.clone())
                .map_err(|e| Error::config(format!("dataset: {e}")))?,
            None => return Err(Error::config("config needs a `dataset` key")),
        };
        let base = base_document(kind)?;
        let merged = merge(base, doc);
        let mut cfg: RunConfigFile = serde_yaml::from_value(merged)
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;

        let plan = cfg.seeds();
        if !explicit_model_seed {
            cfg.model.seed = plan.init;
        }
        if !explicit_train_seed {
            cfg.train.seed = Some(plan.run);
        }
        if !explicit_ckpt_dir {
            cfg.train.checkpoint_dir = cfg.run_dir.clone();
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_yaml(&text, overrides)
    }
}

pub fn model_defaults(kind: DatasetKind) -> ModelConfig {
    match kind {
        DatasetKind::MnistEvenOdd => ModelConfig::mnist_even_odd(),
        DatasetKind::MnistAddition => ModelConfig::mnist_addition(),
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_yaml::to_value(v).map_err(|e| Error::config(e.to_string()))
}

fn base_document(kind: DatasetKind) -> Result<Value> {
    let mut m = Mapping::new();
    m.insert(
        "run_dir".into(),
        Value::String(format!("runs/{}", kind.name())),
    );
    m.insert("seed".into(), Value::Number(0.into()));
    m.insert("model".into(), to_value(&model_defaults(kind))?);
    m.insert("train".into(), to_value(&TrainConfig::default())?);
    Ok(Value::Mapping(m))
}

/// Overlays `top` onto `base`, recursing into mappings.
fn merge(base: Value, top: Value) -> Value {
    match (base, top) {
        (Value::Mapping(mut b), Value::Mapping(t)) => {
            for (k, v) in t {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Mapping(b)
        }
        (_, top) => top,
    }
}

fn lookup<'a>(doc: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter()
        .try_fold(doc, |v, key| v.as_mapping()?.get(*key))
}

const MODEL_ALIASES: [(&str, &str); 4] = [
    ("k", "n_concepts"),
    ("d", "embedding_dim"),
    ("alpha", "prior"),
    ("tau", "temperature"),
];

fn normalize_model_aliases(doc: &mut Value) -> Result<()> {
    let Some(model) = doc
        .as_mapping_mut()
        .and_then(|m| m.get_mut("model"))
        .and_then(Value::as_mapping_mut)
    else {
        return Ok(());
    };
    for (short, long) in MODEL_ALIASES {
        if let Some(v) = model.remove(short) {
            if model.contains_key(long) {
                return Err(Error::config(format!(
                    "model sets both `{short}` and `{long}`"
                )));
            }
            model.insert(long.into(), v);
        }
    }
    Ok(())
}

/// Applies one `dotted.key=value` override; the value is parsed as YAML.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let value: Value = serde_yaml::from_str(raw)
        .map_err(|e| Error::config(format!("override `{assignment}`: {e}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key `{key}` is malformed")));
    }
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        let map = node.as_mapping_mut().ok_or_else(|| {
            Error::config(format!("override `{key}` descends into a non-mapping"))
        })?;
        if i + 1 == parts.len() {
            map.insert((*part).into(), value);
            return Ok(());
        }
        node = map
            .entry((*part).into())
            .or_insert_with(|| Value::Mapping(Mapping::new()));
    }
    Ok(())
}
