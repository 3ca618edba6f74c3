//! Concept dictionaries, per-sample explanations and counterfactual interventions.

pub mod render;

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::SampleSource;
use crate::error::{Error, Result};
use crate::eval::{collect, PassOptions};
use crate::model::{Lcbm, Mode, PredictionBundle};

/// Default number of samples per dictionary entry.
pub const DEFAULT_TOP_K: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptState {
    Active,
    Inactive,
}

/// Concept index -> forced state.
pub type Forcing = BTreeMap<usize, ConceptState>;

/// Where a sample lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub split: String,
    pub index: usize,
}

/// Bottleneck state of a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleActivation {
    /// `(k, d)`
    pub embeddings: Array2<f32>,
    /// `(k,)` eval-mode scores.
    pub scores: Array1<f32>,
    /// `(k,)`
    pub probs: Array1<f32>,
}

impl SampleActivation {
    /// Eval-mode encoding of one `(C, H, W)` image.
    pub fn encode(model: &Lcbm<f32>, image: ndarray::ArrayView3<'_, f32>) -> Result<Self> {
        let act = model.encode(image.insert_axis(Axis(0)), Mode::Eval, None)?;
        Ok(Self {
            embeddings: act.embeddings.index_axis_move(Axis(0), 0),
            scores: act.scores.index_axis_move(Axis(0), 0),
            probs: act.probs.index_axis_move(Axis(0), 0),
        })
    }

    fn batched(&self) -> (Array3<f32>, Array2<f32>) {
        (
            self.embeddings.clone().insert_axis(Axis(0)),
            self.scores.clone().insert_axis(Axis(0)),
        )
    }
}

/// Applies absolute forcings to one sample's rows in place: inactive sets the
/// score to 0; active sets it to 1 and replaces the embedding row with the
/// concept prototype.
pub fn apply_forcing(
    embeddings: &mut ndarray::ArrayViewMut2<'_, f32>,
    scores: &mut ndarray::ArrayViewMut1<'_, f32>,
    prototypes: ndarray::ArrayView2<'_, f32>,
    forced: &Forcing,
) -> Result<()> {
    let k = scores.len();
    if let Some((&bad, _)) = forced.iter().find(|(&j, _)| j >= k) {
        return Err(Error::Request(format!(
            "unknown concept {bad}; the model has {k}"
        )));
    }
    for (&j, state) in forced {
        match state {
            ConceptState::Inactive => scores[j] = 0.0,
            ConceptState::Active => {
                scores[j] = 1.0;
                embeddings.row_mut(j).assign(&prototypes.row(j));
            }
        }
    }
    Ok(())
}

/// Returns a copy of `act` with `forced` applied.
pub fn force(
    model: &Lcbm<f32>,
    act: &SampleActivation,
    forced: &Forcing,
) -> Result<SampleActivation> {
    let mut out = act.clone();
    apply_forcing(
        &mut out.embeddings.view_mut(),
        &mut out.scores.view_mut(),
        model.prototypes(),
        forced,
    )?;
    Ok(out)
}

/// One sample's classifier output in a serializable layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub predicted_class: usize,
    pub class_scores: Vec<f32>,
    /// Concept scores fed to the classifier.
    pub concept_scores: Vec<f32>,
    /// `[class][concept]`
    pub weights: Vec<Vec<f32>>,
    /// `[class][concept]`
    pub importances: Vec<Vec<f32>>,
}

impl SamplePrediction {
    pub fn from_bundle(bundle: &PredictionBundle<f32>, scores: &Array1<f32>, b: usize) -> Self {
        let rows = |a: &Array3<f32>| {
            a.index_axis(Axis(0), b)
                .outer_iter()
                .map(|r| r.to_vec())
                .collect()
        };
        Self {
            predicted_class: bundle.predicted_class[b],
            class_scores: bundle.class_scores.row(b).to_vec(),
            concept_scores: scores.to_vec(),
            weights: rows(&bundle.weights),
            importances: rows(&bundle.importances),
        }
    }
}

fn predict_sample(model: &Lcbm<f32>, act: &SampleActivation) -> Result<SamplePrediction> {
    let (emb, scores) = act.batched();
    let bundle = model.classify(emb.view(), scores.view())?;
    Ok(SamplePrediction::from_bundle(&bundle, &act.scores, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub forced: Forcing,
    pub original: SamplePrediction,
    pub counterfactual: SamplePrediction,
    /// `counterfactual - original`, per class.
    pub score_deltas: Vec<f32>,
    /// Reconstruction from the forced state; the decoder never saw
    /// prototype-substituted embeddings in training, so treat it as advisory.
    #[serde(skip)]
    pub counterfactual_reconstruction: Option<Array3<f32>>,
}

/// Re-classifies `act` with `forced` applied; optionally decodes the result.
pub fn intervene(
    model: &Lcbm<f32>,
    act: &SampleActivation,
    forced: &Forcing,
    reconstruct: bool,
) -> Result<InterventionResult> {
    let cf = force(model, act, forced)?;
    let original = predict_sample(model, act)?;
    let counterfactual = predict_sample(model, &cf)?;
    let score_deltas = counterfactual
        .class_scores
        .iter()
        .zip(&original.class_scores)
        .map(|(a, b)| a - b)
        .collect();
    let counterfactual_reconstruction = if reconstruct {
        let (emb, scores) = cf.batched();
        Some(
            model
                .decode(emb.view(), scores.view())?
                .index_axis_move(Axis(0), 0),
        )
    } else {
        None
    };
    Ok(InterventionResult {
        forced: forced.clone(),
        original,
        counterfactual,
        score_deltas,
        counterfactual_reconstruction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptContribution {
    pub concept: usize,
    /// Eval-mode score, 0 or 1.
    pub score: f32,
    pub probability: f32,
    /// Predicted weight for the predicted class.
    pub weight: f32,
    /// `weight * score`.
    pub importance: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub sample: SampleRef,
    pub label: Option<usize>,
    pub predicted_class: usize,
    pub predicted_score: f32,
    pub class_scores: Vec<f32>,
    pub concepts: Vec<ConceptContribution>,
    #[serde(skip)]
    pub reconstruction: Option<Array3<f32>>,
}

impl Explanation {
    /// Sum of importances; equals `predicted_score` up to rounding.
    pub fn importance_total(&self) -> f64 {
        self.concepts.iter().map(|c| f64::from(c.importance)).sum()
    }
}

/// Eval-mode explanation of one `(C, H, W)` image.
pub fn explain(
    model: &Lcbm<f32>,
    image: ndarray::ArrayView3<'_, f32>,
    sample: SampleRef,
    label: Option<usize>,
) -> Result<Explanation> {
    let pass = model.forward(image.insert_axis(Axis(0)), Mode::Eval, None)?;
    let pred = &pass.prediction;
    let c = pred.predicted_class[0];
    let concepts = (0..model.config().n_concepts)
        .map(|j| ConceptContribution {
            concept: j,
            score: pass.activation.scores[[0, j]],
            probability: pass.activation.probs[[0, j]],
            weight: pred.weights[[0, c, j]],
            importance: pred.importances[[0, c, j]],
        })
        .collect();
    Ok(Explanation {
        sample,
        label,
        predicted_class: c,
        predicted_score: pred.class_scores[[0, c]],
        class_scores: pred.class_scores.row(0).to_vec(),
        concepts,
        reconstruction: Some(pass.reconstruction.slice(s![0, .., .., ..]).to_owned()),
    })
}

/// Explains sample `index` of `source`.
pub fn explain_sample(
    model: &Lcbm<f32>,
    source: &dyn SampleSource,
    split: &str,
    index: usize,
) -> Result<Explanation> {
    if index >= source.len() {
        return Err(Error::data(format!(
            "sample {index} outside {split} split of {}",
            source.len()
        )));
    }
    let batch = source.batch(&[index])?;
    let image = batch.images.index_axis(Axis(0), 0);
    explain(
        model,
        image,
        SampleRef {
            split: split.to_string(),
            index,
        },
        Some(batch.labels[0]),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub index: usize,
    pub activation: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDictionary {
    pub split: String,
    pub top_k: usize,
    /// Provenance label, e.g. the checkpoint path.
    pub source: String,
    /// Per concept, samples ranked by descending activation probability.
    pub concepts: Vec<Vec<DictionaryEntry>>,
}

/// Ranks samples by `(N, k)` activation probabilities; ties go to the lower index.
pub fn rank_by_activation(
    probs: ndarray::ArrayView2<'_, f32>,
    top_k: usize,
) -> Vec<Vec<DictionaryEntry>> {
    probs
        .columns()
        .into_iter()
        .map(|col| {
            let mut order: Vec<usize> = (0..col.len()).collect();
            order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
            order
                .into_iter()
                .take(top_k)
                .map(|i| DictionaryEntry {
                    index: i,
                    activation: col[i],
                })
                .collect()
        })
        .collect()
}

/// Top-`top_k` samples of `source` per concept.
pub fn build_dictionary(
    model: &Lcbm<f32>,
    source: &dyn SampleSource,
    split: &str,
    top_k: usize,
    provenance: &str,
) -> Result<ConceptDictionary> {
    if top_k == 0 {
        return Err(Error::config("top_k must be at least 1"));
    }
    if top_k > source.len() {
        log::warn!(
            "top_k {top_k} exceeds the {} samples in {split}; dictionary entries are truncated",
            source.len()
        );
    }
    let pass = collect(model, source, &PassOptions::default())?;
    Ok(ConceptDictionary {
        split: split.to_string(),
        top_k,
        source: provenance.to_string(),
        concepts: rank_by_activation(pass.probs.view(), top_k),
    })
}
