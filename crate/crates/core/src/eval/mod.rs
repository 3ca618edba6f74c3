//! Test-set metrics: task accuracy, reconstruction error, matched concept F1,
//! concept alignment score, information plane and negative interventions.
//!
//! Every metric runs the model in eval mode (hard scores `pi > 0.5`) over a
//! [`SampleSource`] in index order, so results are deterministic for a given
//! snapshot.

pub mod alignment;
pub mod hungarian;
pub mod information;
pub mod report;

use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleSource;
use crate::error::{Error, Result};
use crate::interpret::{apply_forcing, ConceptState, Forcing};
use crate::model::{Lcbm, Mode};

pub use alignment::{AlignmentScore, ProbeConfig};
pub use hungarian::{hungarian_match, AssignmentResult};
pub use information::InformationPoint;
pub use report::{EvalReport, MetricSummary, MetricValue, ReportMeta, RunValue};

/// Flip probabilities used when none are given.
pub const DEFAULT_INTERVENTION_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Noise draws per flip probability.
pub const DEFAULT_INTERVENTION_DRAWS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassOptions {
    pub batch_size: usize,
    pub keep_embeddings: bool,
    /// Also decode and accumulate squared reconstruction error.
    pub reconstruct: bool,
}

impl Default for PassOptions {
    fn default() -> Self {
        Self {
            batch_size: 250,
            keep_embeddings: false,
            reconstruct: false,
        }
    }
}

/// Eval-mode outputs for a whole split.
#[derive(Debug, Clone)]
pub struct SplitPass {
    /// `(N, k)`
    pub probs: Array2<f32>,
    /// `(N, k)` hard scores in `{0, 1}`.
    pub scores: Array2<f32>,
    pub predicted: Vec<usize>,
    pub labels: Vec<usize>,
    /// `(N, m)` ground-truth concepts, when the source has them.
    pub concepts: Option<Array2<u8>>,
    pub sq_err_sum: f64,
    pub n_pixels: usize,
    /// `(N, k, d)` when requested.
    pub embeddings: Option<Array3<f32>>,
}

impl SplitPass {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn accuracy(&self) -> Result<f64> {
        accuracy_of(&self.predicted, &self.labels)
    }

    pub fn annotations(&self) -> Result<&Array2<u8>> {
        self.concepts
            .as_ref()
            .ok_or_else(|| Error::data("split has no concept annotations"))
    }

    /// Hard scores as `u8`.
    pub fn binary_scores(&self) -> Array2<u8> {
        self.scores.mapv(|v| u8::from(v > 0.5))
    }
}

fn accuracy_of(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::data("accuracy of an empty split"));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn batches(n: usize, batch_size: usize) -> impl Iterator<Item = Vec<usize>> {
    let bs = batch_size.max(1);
    (0..n)
        .step_by(bs)
        .map(move |lo| (lo..(lo + bs).min(n)).collect())
}

/// Runs the model over `source` in index order.
pub fn collect(
    model: &Lcbm<f32>,
    source: &dyn SampleSource,
    opts: &PassOptions,
) -> Result<SplitPass> {
    let n = source.len();
    let cfg = model.config();
    let (k, d) = (cfg.n_concepts, cfg.embedding_dim);
    let mut probs = Array2::zeros((n, k));
    let mut scores = Array2::zeros((n, k));
    let mut embeddings = opts.keep_embeddings.then(|| Array3::zeros((n, k, d)));
    let mut predicted = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut concepts: Option<Vec<Array2<u8>>> = source.has_annotations().then(Vec::new);
    let (mut sq_err_sum, mut n_pixels) = (0.0f64, 0usize);

    for idx in batches(n, opts.batch_size) {
        let batch = source.batch(&idx)?;
        let rows = s![idx[0]..idx[0] + idx.len(), ..];
        let (activation, prediction) = if opts.reconstruct {
            let pass = model.forward(batch.images.view(), Mode::Eval, None)?;
            sq_err_sum += (&pass.reconstruction - &batch.images)
                .iter()
                .map(|&e| f64::from(e) * f64::from(e))
                .sum::<f64>();
            n_pixels += batch.images.len();
            (pass.activation, pass.prediction)
        } else {
            let act = model.encode(batch.images.view(), Mode::Eval, None)?;
            let pred = model.classify_activation(&act)?;
            (act, pred)
        };
        probs.slice_mut(rows).assign(&activation.probs);
        scores.slice_mut(rows).assign(&activation.scores);
        if let Some(e) = embeddings.as_mut() {
            e.slice_mut(s![idx[0]..idx[0] + idx.len(), .., ..])
                .assign(&activation.embeddings);
        }
        predicted.extend_from_slice(&prediction.predicted_class);
        labels.extend_from_slice(&batch.labels);
        if let Some(c) = concepts.as_mut() {
            c.push(
                batch.concepts.ok_or_else(|| {
                    Error::data("source advertises annotations but returned none")
                })?,
            );
        }
    }

    let concepts = match concepts {
        Some(parts) if !parts.is_empty() => {
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            Some(ndarray::concatenate(Axis(0), &views).map_err(|e| Error::data(e.to_string()))?)
        }
        _ => None,
    };
    Ok(SplitPass {
        probs,
        scores,
        predicted,
        labels,
        concepts,
        sq_err_sum,
        n_pixels,
        embeddings,
    })
}

/// Fraction of samples whose predicted class equals the label.
pub fn task_accuracy(model: &Lcbm<f32>, source: &dyn SampleSource) -> Result<f64> {
    collect(model, source, &PassOptions::default())?.accuracy()
}

/// Mean per-pixel squared error between inputs and reconstructions.
pub fn reconstruction_error(model: &Lcbm<f32>, source: &dyn SampleSource) -> Result<f64> {
    let pass = collect(
        model,
        source,
        &PassOptions {
            reconstruct: true,
            ..PassOptions::default()
        },
    )?;
    if pass.n_pixels == 0 {
        return Err(Error::data("reconstruction error of an empty split"));
    }
    Ok(pass.sq_err_sum / pass.n_pixels as f64)
}

/// Hungarian-matched macro F1 between ground-truth and learned concepts.
pub fn concept_f1(model: &Lcbm<f32>, source: &dyn SampleSource) -> Result<AlignmentScore> {
    if !source.has_annotations() {
        return Err(Error::data("concept F1 needs concept annotations"));
    }
    let pass = collect(model, source, &PassOptions::default())?;
    alignment::concept_f1_from(pass.annotations()?.view(), pass.binary_scores().view())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CasMode {
    /// Signal is the activation probability.
    Probability,
    /// Signal is a cross-validated linear probe on the concept embedding.
    Embedding,
}

/// Concept alignment score, see [`alignment`].
pub fn cas(
    model: &Lcbm<f32>,
    source: &dyn SampleSource,
    mode: CasMode,
    probe: &ProbeConfig,
) -> Result<AlignmentScore> {
    if !source.has_annotations() {
        return Err(Error::data("concept alignment needs concept annotations"));
    }
    let opts = PassOptions {
        keep_embeddings: mode == CasMode::Embedding,
        ..PassOptions::default()
    };
    let pass = collect(model, source, &opts)?;
    let annotations = pass.annotations()?;
    match mode {
        CasMode::Probability => alignment::cas_from_probs(annotations.view(), pass.probs.view()),
        CasMode::Embedding => alignment::cas_from_embeddings(
            annotations.view(),
            pass.embeddings.as_ref().expect("requested").view(),
            probe,
        ),
    }
}

/// `(I(C;X), I(C;Y))` of one snapshot over `source`.
pub fn information_point(model: &Lcbm<f32>, source: &dyn SampleSource) -> Result<InformationPoint> {
    if source.len() < information::MIN_SAMPLES {
        return Err(Error::Estimator(format!(
            "{} samples; at least {} are needed",
            source.len(),
            information::MIN_SAMPLES
        )));
    }
    let pass = collect(model, source, &PassOptions::default())?;
    information::information_point(pass.probs.view(), pass.scores.view(), &pass.labels)
}

/// Information-plane trajectory, one point per snapshot.
pub fn information_plane(
    snapshots: &[Lcbm<f32>],
    source: &dyn SampleSource,
) -> Result<Vec<InformationPoint>> {
    snapshots
        .iter()
        .map(|m| information_point(m, source))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPoint {
    pub probability: f64,
    /// Mean accuracy over draws.
    pub accuracy: f64,
    pub std: f64,
    pub draws: Vec<f64>,
}

/// Accuracy when each eval-mode concept score is flipped independently with
/// probability `p`. Flipping to active also substitutes the prototype for the
/// embedding row; the decoder is not involved.
///
/// Draw `r` at grid position `g` uses ChaCha8 stream `g * draws + r` of `seed`.
pub fn negative_interventions(
    model: &Lcbm<f32>,
    source: &dyn SampleSource,
    grid: &[f64],
    draws: usize,
    seed: u64,
) -> Result<Vec<InterventionPoint>> {
    if let Some(p) = grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::config(format!(
            "flip probability {p} outside [0, 1]"
        )));
    }
    if draws == 0 {
        return Err(Error::config("at least one noise draw is needed"));
    }
    if source.is_empty() {
        return Err(Error::data("interventions on an empty split"));
    }
    let runs = grid.len() * draws;
    let mut rngs: Vec<ChaCha8Rng> = (0..runs)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            rng
        })
        .collect();
    let mut hits = vec![0usize; runs];
    let prototypes = model.prototypes();
    let opts = PassOptions::default();

    for idx in batches(source.len(), opts.batch_size) {
        let batch = source.batch(&idx)?;
        let act = model.encode(batch.images.view(), Mode::Eval, None)?;
        for (run, rng) in rngs.iter_mut().enumerate() {
            let p = grid[run / draws];
            let mut emb = act.embeddings.clone();
            let mut scores = act.scores.clone();
            for b in 0..idx.len() {
                let forced: Forcing = (0..scores.ncols())
                    .filter(|_| rng.random_bool(p))
                    .map(|j| {
                        let state = if scores[[b, j]] > 0.5 {
                            ConceptState::Inactive
                        } else {
                            ConceptState::Active
                        };
                        (j, state)
                    })
                    .collect();
                apply_forcing(
                    &mut emb.index_axis_mut(Axis(0), b),
                    &mut scores.index_axis_mut(Axis(0), b),
                    prototypes,
                    &forced,
                )?;
            }
            let pred = model.classify(emb.view(), scores.view())?;
            hits[run] += pred
                .predicted_class
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
        }
    }

    let n = source.len() as f64;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(g, &probability)| {
            let accs: Vec<f64> = hits[g * draws..(g + 1) * draws]
                .iter()
                .map(|&h| h as f64 / n)
                .collect();
            let summary = MetricSummary::from_values(&accs);
            InterventionPoint {
                probability,
                accuracy: summary.mean,
                std: summary.std,
                draws: accs,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests;
