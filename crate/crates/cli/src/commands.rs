use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lcbm_core::checkpoint::load_checkpoint;
use lcbm_core::data::{self, archive, DatasetKind, DatasetSplit, SampleSource};
use lcbm_core::eval::report::RunValue;
use lcbm_core::eval::{self, CasMode, EvalReport, ProbeConfig, ReportMeta};
use lcbm_core::interpret::{self, render};
use lcbm_core::train::SeedPlan;
use lcbm_core::{fit, Error, FitOutcome, Lcbm, Result};

use crate::config::{RunConfigFile, EFFECTIVE_CONFIG};

/// Builds (or reads from `cache_dir`) the dataset for a run seed.
pub fn load_split(
    kind: DatasetKind,
    root: &Path,
    seeds: &SeedPlan,
    cache_dir: Option<&Path>,
) -> Result<DatasetSplit> {
    let build = || data::build(kind, root, seeds.split, seeds.pairing);
    match cache_dir {
        Some(dir) => {
            let pairing = (kind == DatasetKind::MnistAddition).then_some(seeds.pairing);
            let dir = dir.join(format!("{}-{}-{}", kind.name(), seeds.split, seeds.pairing));
            archive::cached(&dir, kind, seeds.split, pairing, build)
        }
        None => build(),
    }
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn train(cfg: &RunConfigFile) -> Result<FitOutcome> {
    fs::create_dir_all(&cfg.run_dir)?;
    write_file(&cfg.run_dir.join(EFFECTIVE_CONFIG), cfg.to_yaml()?)?;
    let split = load_split(
        cfg.dataset,
        &cfg.data_root(),
        &cfg.seeds(),
        cfg.cache_dir.as_deref(),
    )?;
    log::info!(
        "{}: {} train / {} validation samples",
        cfg.dataset.name(),
        split.train.len(),
        split.validation.len()
    );
    let mut model = Lcbm::<f32>::new(cfg.model.clone())?;
    let outcome = fit(&mut model, &split.train, &split.validation, &cfg.train)?;
    log::info!(
        "best epoch {} -> {}",
        outcome.best_epoch,
        outcome.best_checkpoint.display()
    );
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Accuracy,
    Mse,
    F1,
    Cas,
    CasEmbedding,
    Interventions,
    Information,
}

impl Metric {
    pub fn key(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Mse => "mse",
            Metric::F1 => "f1",
            Metric::Cas => "cas",
            Metric::CasEmbedding => "cas_embedding",
            Metric::Interventions => "interventions",
            Metric::Information => "information",
        }
    }

    pub const ALL: [Metric; 7] = [
        Metric::Accuracy,
        Metric::Mse,
        Metric::F1,
        Metric::Cas,
        Metric::CasEmbedding,
        Metric::Interventions,
        Metric::Information,
    ];
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Metric::ALL
            .into_iter()
            .find(|m| m.key() == s.trim())
            .ok_or_else(|| {
                let known: Vec<_> = Metric::ALL.iter().map(|m| m.key()).collect();
                format!("unknown metric `{s}`; expected one of {}", known.join(", "))
            })
    }
}

/// Dataset a checkpoint was trained on, judged by its class count.
pub fn infer_dataset(model: &Lcbm<f32>) -> Result<DatasetKind> {
    match model.config().n_classes {
        2 => Ok(DatasetKind::MnistEvenOdd),
        19 => Ok(DatasetKind::MnistAddition),
        n => Err(Error::config(format!(
            "cannot infer the dataset of a {n}-class model; pass --dataset"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoints: Vec<PathBuf>,
    pub dataset: Option<DatasetKind>,
    pub split: String,
    pub metrics: Vec<Metric>,
    pub data_root: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub grid: Vec<f64>,
    pub draws: usize,
    pub out: Option<PathBuf>,
}

/// Metrics of one checkpoint on `source`.
pub fn evaluate(
    model: &Lcbm<f32>,
    source: &dyn SampleSource,
    metrics: &[Metric],
    grid: &[f64],
    draws: usize,
    seed: u64,
) -> Result<BTreeMap<String, RunValue>> {
    let mut out = BTreeMap::new();
    fn put(out: &mut BTreeMap<String, RunValue>, k: &str, v: f64) {
        out.insert(k.to_string(), RunValue::Scalar(v));
    }
    for &m in metrics {
        match m {
            Metric::Accuracy => {
                put(&mut out, m.key(), eval::task_accuracy(model, source)?);
            }
            Metric::Mse => {
                put(
                    &mut out,
                    m.key(),
                    eval::reconstruction_error(model, source)?,
                );
            }
            Metric::F1 => {
                put(&mut out, m.key(), eval::concept_f1(model, source)?.score);
            }
            Metric::Cas => {
                put(
                    &mut out,
                    m.key(),
                    eval::cas(model, source, CasMode::Probability, &ProbeConfig::default())?.score,
                );
            }
            Metric::CasEmbedding => {
                let probe = ProbeConfig {
                    seed,
                    ..ProbeConfig::default()
                };
                put(
                    &mut out,
                    m.key(),
                    eval::cas(model, source, CasMode::Embedding, &probe)?.score,
                );
            }
            Metric::Information => {
                let p = eval::information_point(model, source)?;
                put(&mut out, "i_cx", p.i_cx);
                put(&mut out, "i_cy", p.i_cy);
            }
            Metric::Interventions => {
                let curve = eval::negative_interventions(model, source, grid, draws, seed)?;
                out.insert(m.key().to_string(), RunValue::Curve(curve));
            }
        }
    }
    Ok(out)
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport> {
    if args.checkpoints.is_empty() {
        return Err(Error::config("no checkpoint given"));
    }
    let mut runs = Vec::new();
    let mut meta = ReportMeta {
        split: args.split.clone(),
        ..ReportMeta::default()
    };
    for path in &args.checkpoints {
        let (model, ckpt) = load_checkpoint::<f32>(path)?;
        let kind = match args.dataset {
            Some(k) => k,
            None => infer_dataset(&model)?,
        };
        let split = load_split(
            kind,
            &args.data_root,
            &SeedPlan::new(ckpt.seed),
            args.cache_dir.as_deref(),
        )?;
        let source = split.part(&args.split)?;
        log::info!(
            "evaluating {} on {} {}",
            path.display(),
            kind.name(),
            args.split
        );
        runs.push(evaluate(
            &model,
            source,
            &args.metrics,
            &args.grid,
            args.draws,
            ckpt.seed,
        )?);
        meta.dataset = kind.name().to_string();
        meta.n_concepts = model.config().n_concepts;
        meta.embedding_dim = model.config().embedding_dim;
        meta.seeds.push(ckpt.seed);
        meta.checkpoints.push(path.display().to_string());
    }
    let report = EvalReport::aggregate(meta, &runs)?;
    if let Some(dir) = &args.out {
        write_file(&dir.join("report.json"), report.to_json()?)?;
        write_file(&dir.join("report.csv"), report.to_csv())?;
        write_file(&dir.join("report.txt"), report.to_table())?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct DictionaryArgs {
    pub checkpoint: PathBuf,
    pub dataset: Option<DatasetKind>,
    pub split: String,
    pub top_k: usize,
    pub data_root: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub out: PathBuf,
    /// Pixel repetition factor of the contact sheets.
    pub scale: u32,
}

/// Writes `dictionary.json` and one `concept_XX.png` contact sheet per concept.
pub fn dictionary(args: &DictionaryArgs) -> Result<interpret::ConceptDictionary> {
    let (model, ckpt) = load_checkpoint::<f32>(&args.checkpoint)?;
    let kind = args.dataset.map_or_else(|| infer_dataset(&model), Ok)?;
    let split = load_split(
        kind,
        &args.data_root,
        &SeedPlan::new(ckpt.seed),
        args.cache_dir.as_deref(),
    )?;
    let source = split.part(&args.split)?;
    let provenance = args.checkpoint.display().to_string();
    let dict = interpret::build_dictionary(&model, source, &args.split, args.top_k, &provenance)?;
    fs::create_dir_all(&args.out)?;
    write_file(
        &args.out.join("dictionary.json"),
        serde_json::to_string_pretty(&dict)?,
    )?;
    for (j, entries) in dict.concepts.iter().enumerate() {
        let idx: Vec<usize> = entries.iter().map(|e| e.index).collect();
        let batch = source.batch(&idx)?;
        let views: Vec<_> = batch.images.outer_iter().collect();
        let sheet = render::contact_sheet(&views, args.scale);
        write_file(
            &args.out.join(format!("concept_{j:02}.png")),
            render::encode_png(&sheet)?,
        )?;
    }
    Ok(dict)
}

#[derive(Debug, Clone)]
pub struct ExplainArgs {
    pub checkpoint: PathBuf,
    pub dataset: Option<DatasetKind>,
    pub split: String,
    pub index: usize,
    pub data_root: PathBuf,
    pub cache_dir: Option<PathBuf>,
    /// JSON path; the bar plot goes next to it with a `.png` extension.
    pub out: PathBuf,
}

pub fn explain(args: &ExplainArgs) -> Result<interpret::Explanation> {
    let (model, ckpt) = load_checkpoint::<f32>(&args.checkpoint)?;
    let kind = args.dataset.map_or_else(|| infer_dataset(&model), Ok)?;
    let split = load_split(
        kind,
        &args.data_root,
        &SeedPlan::new(ckpt.seed),
        args.cache_dir.as_deref(),
    )?;
    let source = split.part(&args.split)?;
    let e = interpret::explain_sample(&model, source, &args.split, args.index)?;
    write_file(&args.out, serde_json::to_string_pretty(&e)?)?;
    let png = render::encode_png(&render::importance_bars(&e))?;
    write_file(&args.out.with_extension("png"), png)?;
    Ok(e)
}
