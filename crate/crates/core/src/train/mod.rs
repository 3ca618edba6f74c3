//! Minibatch training with validation-based checkpoint selection.
//!
//! Each epoch shuffles the training indices, optimizes the weighted negative
//! ELBO with relaxed concept scores, then runs the validation split in eval
//! mode for task accuracy and information-plane estimates. The checkpoint with
//! the best validation accuracy wins; ties keep the earlier epoch.

mod optim;
mod seed;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::SampleSource;
use crate::error::{Error, Result};
use crate::eval::{collect, information, PassOptions};
use crate::model::loss::{elbo_loss_and_grads, LossBreakdown};
use crate::model::{Lcbm, Mode};

pub use optim::Adam;
pub use seed::{global_seed, set_global_seed, stream_rng, SeedPlan, Stream};

pub const INIT_CHECKPOINT: &str = "init.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const EPOCH_LOG: &str = "epochs.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    AdamLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyMetric {
    #[default]
    ValTaskAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub early_metric: EarlyMetric,
    /// Batches between progress lines; 0 silences them.
    pub log_every: usize,
    pub checkpoint_dir: PathBuf,
    /// Seed for shuffling and concrete noise; the global seed when absent.
    pub seed: Option<u64>,
    /// Estimate the information plane on the validation split every epoch.
    pub track_information: bool,
    /// Hold the batch-prior weight at 0 for this many epochs.
    pub kl_delay_epochs: f64,
    /// Then ramp it linearly to its configured value over this many epochs;
    /// 0 switches it on at once.
    pub kl_warmup_epochs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            optimizer: Optimizer::AdamLike,
            early_metric: EarlyMetric::ValTaskAccuracy,
            log_every: 100,
            checkpoint_dir: PathBuf::from("runs/checkpoints"),
            seed: None,
            track_information: true,
            kl_delay_epochs: 0.0,
            kl_warmup_epochs: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "batch_size must be at least 2 (the batch prior term is degenerate at 1), got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        for (name, v) in [
            ("kl_delay_epochs", self.kl_delay_epochs),
            ("kl_warmup_epochs", self.kl_warmup_epochs),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    /// Sample-weighted mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub val_accuracy: f64,
    /// Nats; absent when the validation split is too small to estimate.
    pub i_cx: Option<f64>,
    pub i_cy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub best_checkpoint: PathBuf,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub log: Vec<EpochLog>,
}

/// Index of the first maximum; `None` for an empty slice.
pub fn select_best(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

fn check_shapes(model: &Lcbm<f32>, source: &dyn SampleSource, name: &str) -> Result<()> {
    let cfg = model.config();
    if source.image_shape() != cfg.image_shape {
        return Err(Error::config(format!(
            "{name} images are {:?} but the model expects {:?}",
            source.image_shape(),
            cfg.image_shape
        )));
    }
    if source.n_classes() != cfg.n_classes {
        return Err(Error::config(format!(
            "{name} has {} classes but the model predicts {}",
            source.n_classes(),
            cfg.n_classes
        )));
    }
    Ok(())
}

fn append_log(path: &Path, entry: &EpochLog) -> Result<()> {
    let mut f = OpenOptions::new().append(true).create(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(entry)?)?;
    Ok(())
}

/// Reads an epoch log written by [`fit`].
pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Multiplier of the batch-prior weight after `progress` epochs.
pub fn kl_ramp(cfg: &TrainConfig, progress: f64) -> f64 {
    let t = progress - cfg.kl_delay_epochs;
    if t < 0.0 {
        0.0
    } else if cfg.kl_warmup_epochs > 0.0 {
        (t / cfg.kl_warmup_epochs).min(1.0)
    } else {
        1.0
    }
}

/// One optimization pass over `train`; returns the mean loss.
///
/// `completed` is the number of epochs already run, which positions the
/// batch-prior warm-up.
pub fn train_epoch(
    model: &mut Lcbm<f32>,
    train: &dyn SampleSource,
    cfg: &TrainConfig,
    completed: usize,
    optimizer: &mut Adam,
    shuffle_rng: &mut rand_chacha::ChaCha8Rng,
    noise_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<LossBreakdown> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(shuffle_rng);
    let mut mean = LossBreakdown::default();
    let mut seen = 0usize;
    let mut model_cfg = model.config().clone();
    let w_kl = model_cfg.w_kl;
    let n_batches = order.len().div_ceil(cfg.batch_size);
    for (i, idx) in order.chunks(cfg.batch_size).enumerate() {
        if idx.len() < 2 {
            // a single-sample batch has no meaningful batch prior
            continue;
        }
        model_cfg.w_kl = w_kl * kl_ramp(cfg, completed as f64 + i as f64 / n_batches as f64);
        let batch = train.batch(idx)?;
        let noise = model.draw_noise(idx.len(), noise_rng);
        let pass = model.forward(batch.images.view(), Mode::Train, Some(noise.view()))?;
        let (loss, grads) = elbo_loss_and_grads(
            batch.images.view(),
            &batch.labels,
            &pass.activation,
            &pass.prediction,
            pass.reconstruction.view(),
            &model_cfg,
        )?;
        model.zero_grad();
        model.backward(&pass, &grads);
        optimizer.step(model);
        mean.accumulate(&loss, idx.len() as f64);
        seen += idx.len();
        if cfg.log_every > 0 && (i + 1) % cfg.log_every == 0 {
            log::info!(
                "batch {}/{n_batches}: total {:.4} rec {:.4} task {:.4} kl {:.4}",
                i + 1,
                loss.total,
                loss.rec,
                loss.task,
                loss.kl
            );
        }
    }
    if seen == 0 {
        return Err(Error::data(
            "training split yields no batch of at least two samples",
        ));
    }
    let bad = model.non_finite_params();
    if !bad.is_empty() {
        return Err(Error::non_finite(format!("parameters {}", bad.join(", "))));
    }
    let mut out = LossBreakdown::default();
    out.accumulate(&mean, 1.0 / seen as f64);
    Ok(out)
}

/// Trains `model` in place and returns the best-validation checkpoint.
///
/// `model` ends holding the final-epoch weights, not necessarily the best ones.
pub fn fit(
    model: &mut Lcbm<f32>,
    train: &dyn SampleSource,
    validation: &dyn SampleSource,
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    check_shapes(model, train, "training split")?;
    check_shapes(model, validation, "validation split")?;
    if validation.is_empty() {
        return Err(Error::data("validation split is empty"));
    }
    let seed = cfg.seed.unwrap_or_else(global_seed);
    let dir = &cfg.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    let log_path = dir.join(EPOCH_LOG);
    File::create(&log_path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", log_path.display())))?;

    let init_path = dir.join(INIT_CHECKPOINT);
    save_checkpoint(
        model,
        &CheckpointMeta {
            epoch: 0,
            seed,
            metrics: Default::default(),
        },
        &init_path,
    )?;
    let mut outcome = FitOutcome {
        best_checkpoint: init_path,
        best_epoch: 0,
        best_val_accuracy: None,
        log: Vec::new(),
    };

    let mut optimizer = match cfg.optimizer {
        Optimizer::AdamLike => Adam::new(cfg.learning_rate, cfg.weight_decay),
    };
    let mut shuffle_rng = stream_rng(seed, Stream::Shuffle);
    let mut noise_rng = stream_rng(seed, Stream::Noise);
    let estimate_information =
        cfg.track_information && validation.len() >= information::MIN_SAMPLES;
    if cfg.track_information && !estimate_information {
        log::warn!(
            "validation split has {} samples; information-plane estimates are skipped",
            validation.len()
        );
    }

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let loss = train_epoch(
            model,
            train,
            cfg,
            epoch - 1,
            &mut optimizer,
            &mut shuffle_rng,
            &mut noise_rng,
        )?;
        let pass = collect(model, validation, &PassOptions::default())?;
        let val_accuracy = pass.accuracy()?;
        let info = if estimate_information {
            Some(information::information_point(
                pass.probs.view(),
                pass.scores.view(),
                &pass.labels,
            )?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            loss,
            val_accuracy,
            i_cx: info.map(|p| p.i_cx),
            i_cy: info.map(|p| p.i_cy),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (rec {:.4} task {:.4} kl {:.4}) val acc {:.4} in {:.1}s",
            loss.total,
            loss.rec,
            loss.task,
            loss.kl,
            val_accuracy,
            entry.seconds
        );
        append_log(&log_path, &entry)?;

        if outcome.best_val_accuracy.is_none_or(|b| val_accuracy > b) {
            let path = dir.join(BEST_CHECKPOINT);
            let mut metrics = std::collections::BTreeMap::new();
            metrics.insert("val_accuracy".to_string(), val_accuracy);
            metrics.insert("loss".to_string(), loss.total);
            save_checkpoint(
                model,
                &CheckpointMeta {
                    epoch,
                    seed,
                    metrics,
                },
                &path,
            )?;
            outcome.best_checkpoint = path;
            outcome.best_epoch = epoch;
            outcome.best_val_accuracy = Some(val_accuracy);
        }
        outcome.log.push(entry);
    }
    Ok(outcome)
}
