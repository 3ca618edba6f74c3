//! The concept-bottleneck network.
//!
//! Data flow for a batch of `B` images:
//!
//! ```text
//! images -> backbone -> features (B, s)
//!        -> per-concept heads -> embeddings c (B, k, d)
//!        -> logits c_j . t_j (B, k) -> probs sigmoid(logits) -> scores (B, k)
//!        -> weight predictor phi(c_j) -> W (B, n, k); class scores sum_j W[:, j] * score_j
//!        -> decoder(score_j * c_j, flattened concept-major) -> reconstruction
//! ```

pub mod backbone;
pub mod classifier;
pub mod decoder;
pub mod heads;
pub mod loss;
pub mod sampling;

use std::sync::Arc;

use ndarray::{
    s, Array2, Array3, Array4, ArrayView, ArrayView2, ArrayView3, ArrayView4, Axis, Ix2,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BackboneMode, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{first_non_finite, sigmoid, Param, ParamSlot, ParamVisitor, Real};

use backbone::{Backbone, BackboneCache, FeatureExtractor, SmallCnn};
use classifier::{WeightCache, WeightPredictor};
use decoder::{Decoder, DecoderCache};
use heads::{ConceptHeads, HeadsCache};
pub use sampling::{draw_noise, logit_bound, relaxed_scores, sample_scores};

/// Whether concept scores are relaxed samples or hard thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Binary-concrete relaxation driven by caller-supplied uniform noise.
    Train,
    /// `score = 1` iff `prob > 0.5`.
    Eval,
}

/// Per-sample bottleneck state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptActivation<F: Real> {
    /// `(B, k, d)`
    pub embeddings: Array3<F>,
    /// `(B, k)`, embedding-prototype dot products.
    pub logits: Array2<F>,
    /// `(B, k)`, `sigmoid(logits)`.
    pub probs: Array2<F>,
    /// `(B, k)`
    pub scores: Array2<F>,
}

impl<F: Real> ConceptActivation<F> {
    pub fn batch_size(&self) -> usize {
        self.logits.nrows()
    }

    pub fn n_concepts(&self) -> usize {
        self.logits.ncols()
    }
}

/// Output of the locally linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle<F: Real> {
    /// Predicted weights `(B, n_classes, k)`.
    pub weights: Array3<F>,
    /// `(B, n_classes)`
    pub class_scores: Array2<F>,
    /// `weights * scores`, `(B, n_classes, k)`.
    pub importances: Array3<F>,
    pub predicted_class: Vec<usize>,
}

/// Everything a backward pass needs from the matching forward pass.
pub struct ForwardPass<F: Real> {
    pub activation: ConceptActivation<F>,
    pub prediction: PredictionBundle<F>,
    pub reconstruction: Array4<F>,
    mode: Mode,
    trace: Trace<F>,
}

struct Trace<F: Real> {
    /// Relaxed scores behind straight-through hard samples.
    relaxed: Option<Array2<F>>,
    backbone: BackboneCache<F>,
    features: Array2<F>,
    heads: HeadsCache<F>,
    weights: WeightCache<F>,
    decoder: DecoderCache<F>,
}

type EncodeTrace<F> = (
    ConceptActivation<F>,
    Option<Array2<F>>,
    BackboneCache<F>,
    Array2<F>,
    HeadsCache<F>,
);

/// Gradients of the loss with respect to the three model outputs it reads.
#[derive(Debug, Clone)]
pub struct OutputGrads<F: Real> {
    pub reconstruction: Array4<F>,
    pub class_scores: Array2<F>,
    pub probs: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct Lcbm<F: Real> {
    config: ModelConfig,
    backbone: Backbone<F>,
    heads: ConceptHeads<F>,
    prototypes: Param<F, Ix2>,
    classifier: WeightPredictor<F>,
    decoder: Decoder<F>,
}

impl<F: Real> Lcbm<F> {
    /// Builds a freshly initialized model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.backbone_mode == BackboneMode::FrozenExternal {
            return Err(Error::config(
                "frozen_external backbone needs an extractor; use Lcbm::with_external_backbone",
            ));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = Backbone::SmallCnn(SmallCnn::new(&config, &mut rng));
        Ok(Self::assemble(config, backbone, &mut rng))
    }

    /// Builds a model whose features come from a frozen extractor.
    pub fn with_external_backbone(
        config: ModelConfig,
        extractor: Arc<dyn FeatureExtractor<F>>,
    ) -> Result<Self> {
        config.validate()?;
        if config.backbone_mode != BackboneMode::FrozenExternal {
            return Err(Error::config(
                "external extractor given but backbone_mode is not frozen_external",
            ));
        }
        if config.arch.external_feature_dim != Some(extractor.feature_dim()) {
            return Err(Error::config(format!(
                "extractor emits {} features but arch.external_feature_dim is {:?}",
                extractor.feature_dim(),
                config.arch.external_feature_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self::assemble(
            config,
            Backbone::External(extractor),
            &mut rng,
        ))
    }

    fn assemble<R: Rng>(config: ModelConfig, backbone: Backbone<F>, rng: &mut R) -> Self {
        let feature_dim = match &backbone {
            Backbone::SmallCnn(_) => config.arch.feature_dim,
            Backbone::External(e) => e.feature_dim(),
        };
        let (k, d) = (config.n_concepts, config.embedding_dim);
        let heads = ConceptHeads::new(k, feature_dim, d, rng);
        let prototypes = Param::normal((k, d), 1.0 / (d as f64).sqrt(), rng);
        let classifier =
            WeightPredictor::new(d, config.arch.classifier_hidden, config.n_classes, rng);
        let decoder = Decoder::new(&config, rng);
        Self {
            config,
            backbone,
            heads,
            prototypes,
            classifier,
            decoder,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Prototype matrix `(k, d)`.
    pub fn prototypes(&self) -> ArrayView2<'_, F> {
        self.prototypes.value.view()
    }

    /// Draws relaxation noise for a batch from `rng`.
    pub fn draw_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Array2<F> {
        draw_noise(batch, self.config.n_concepts, rng)
    }

    fn check_images(&self, images: &ArrayView4<'_, F>) -> Result<()> {
        let (b, c, h, w) = images.dim();
        if [c, h, w] != self.config.image_shape {
            return Err(Error::config(format!(
                "image shape {:?} does not match configured {:?}",
                [c, h, w],
                self.config.image_shape
            )));
        }
        if b == 0 {
            return Err(Error::data("empty batch"));
        }
        Ok(())
    }

    fn check_finite<'a, D: ndarray::Dimension>(
        site: &str,
        a: impl Into<ArrayView<'a, F, D>>,
    ) -> Result<()>
    where
        F: 'a,
    {
        let view = a.into();
        match first_non_finite(view.iter().copied()) {
            Some(_) => Err(Error::non_finite(site)),
            None => Ok(()),
        }
    }

    /// Activation, relaxed straight-through scores, and the caches backward needs.
    fn encode_traced(
        &self,
        images: ArrayView4<'_, F>,
        mode: Mode,
        noise: Option<ArrayView2<'_, F>>,
    ) -> Result<EncodeTrace<F>> {
        self.check_images(&images)?;
        let (b, k) = (images.dim().0, self.config.n_concepts);
        let (features, bcache) = self.backbone.forward(images);
        Self::check_finite("backbone", &features)?;
        let (embeddings, hcache) = self.heads.forward(features.view());
        Self::check_finite("concept_heads", &embeddings)?;
        let mut logits = Array2::zeros((b, k));
        for ((bi, j), l) in logits.indexed_iter_mut() {
            let e = embeddings.slice(s![bi, j, ..]);
            *l = e.dot(&self.prototypes.value.row(j));
        }
        Self::check_finite("prototype_logits", &logits)?;
        let probs = logits.mapv(sigmoid);
        let mut relaxed = None;
        let scores = match mode {
            Mode::Eval => logits.mapv(|l| {
                if sigmoid(l) > F::lit(0.5) {
                    F::one()
                } else {
                    F::zero()
                }
            }),
            Mode::Train => {
                let noise =
                    noise.ok_or_else(|| Error::config("train-mode encoding requires noise"))?;
                if noise.dim() != (b, k) {
                    return Err(Error::config(format!(
                        "noise shape {:?} does not match ({b}, {k})",
                        noise.dim()
                    )));
                }
                let soft = relaxed_scores(logits.view(), noise, self.config.temperature)?;
                if self.config.straight_through {
                    let hard = soft.mapv(|v| if v > F::lit(0.5) { F::one() } else { F::zero() });
                    relaxed = Some(soft);
                    hard
                } else {
                    soft
                }
            }
        };
        let activation = ConceptActivation {
            embeddings,
            logits,
            probs,
            scores,
        };
        Ok((activation, relaxed, bcache, features, hcache))
    }

    /// Concept embeddings, probabilities and scores for a batch.
    pub fn encode(
        &self,
        images: ArrayView4<'_, F>,
        mode: Mode,
        noise: Option<ArrayView2<'_, F>>,
    ) -> Result<ConceptActivation<F>> {
        self.encode_traced(images, mode, noise).map(|t| t.0)
    }

    fn classify_traced(
        &self,
        embeddings: ArrayView3<'_, F>,
        scores: ArrayView2<'_, F>,
    ) -> Result<(PredictionBundle<F>, WeightCache<F>)> {
        let (b, k, d) = embeddings.dim();
        if k != self.config.n_concepts || d != self.config.embedding_dim || scores.dim() != (b, k) {
            return Err(Error::config(format!(
                "activation shapes ({b}, {k}, {d}) / {:?} do not match the model",
                scores.dim()
            )));
        }
        let (weights, cache) = self.classifier.forward(embeddings);
        Self::check_finite("weight_predictor", &weights)?;
        Ok((linear_combination(weights, scores), cache))
    }

    /// Locally linear prediction from (possibly intervened) embeddings and scores.
    pub fn classify(
        &self,
        embeddings: ArrayView3<'_, F>,
        scores: ArrayView2<'_, F>,
    ) -> Result<PredictionBundle<F>> {
        self.classify_traced(embeddings, scores).map(|t| t.0)
    }

    pub fn classify_activation(
        &self,
        activation: &ConceptActivation<F>,
    ) -> Result<PredictionBundle<F>> {
        self.classify(activation.embeddings.view(), activation.scores.view())
    }

    /// Decoder input: `score_j * c_j`, flattened concept-major.
    pub fn masked_input(embeddings: ArrayView3<'_, F>, scores: ArrayView2<'_, F>) -> Array2<F> {
        let (b, k, d) = embeddings.dim();
        let masked = &embeddings * &scores.insert_axis(Axis(2));
        masked
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, k * d))
            .expect("standard layout")
    }

    fn decode_traced(
        &self,
        embeddings: ArrayView3<'_, F>,
        scores: ArrayView2<'_, F>,
    ) -> Result<(Array4<F>, DecoderCache<F>)> {
        let (out, cache) = self.decoder.forward(Self::masked_input(embeddings, scores));
        let [c, h, w] = self.config.image_shape;
        let (_, oc, oh, ow) = out.dim();
        if [oc, oh, ow] != [c, h, w] {
            return Err(Error::config(format!(
                "decoder emits {:?} but images are {:?}",
                [oc, oh, ow],
                self.config.image_shape
            )));
        }
        Self::check_finite("decoder", &out)?;
        Ok((out, cache))
    }

    /// Reconstruction from masked embeddings, values in `[0, 1]`.
    pub fn decode(
        &self,
        embeddings: ArrayView3<'_, F>,
        scores: ArrayView2<'_, F>,
    ) -> Result<Array4<F>> {
        self.decode_traced(embeddings, scores).map(|t| t.0)
    }

    /// Full forward pass retaining what [`Lcbm::backward`] needs.
    pub fn forward(
        &self,
        images: ArrayView4<'_, F>,
        mode: Mode,
        noise: Option<ArrayView2<'_, F>>,
    ) -> Result<ForwardPass<F>> {
        let (activation, relaxed, backbone, features, heads) =
            self.encode_traced(images, mode, noise)?;
        let (prediction, weights) =
            self.classify_traced(activation.embeddings.view(), activation.scores.view())?;
        let (reconstruction, decoder) =
            self.decode_traced(activation.embeddings.view(), activation.scores.view())?;
        Ok(ForwardPass {
            activation,
            prediction,
            reconstruction,
            mode,
            trace: Trace {
                relaxed,
                backbone,
                features,
                heads,
                weights,
                decoder,
            },
        })
    }

    /// Accumulates parameter gradients for the given output gradients.
    ///
    /// Hard eval-mode scores are piecewise constant, so they pass no gradient.
    pub fn backward(&mut self, pass: &ForwardPass<F>, grads: &OutputGrads<F>) {
        let act = &pass.activation;
        let pred = &pass.prediction;
        let (b, k, d) = act.embeddings.dim();

        let dmasked = self
            .decoder
            .backward(&pass.trace.decoder, grads.reconstruction.view());
        let dmasked = dmasked
            .into_shape_with_order((b, k, d))
            .expect("standard layout");
        let mut demb = &dmasked * &act.scores.view().insert_axis(Axis(2));
        let mut dscores = (&dmasked * &act.embeddings).sum_axis(Axis(2));

        // class_scores[b, i] = sum_j W[b, i, j] * s[b, j]
        let dcs = grads.class_scores.view().insert_axis(Axis(2));
        let dweights = &dcs * &act.scores.view().insert_axis(Axis(1));
        dscores += &(&pred.weights * &dcs).sum_axis(Axis(1));
        demb += &self
            .classifier
            .backward(&pass.trace.weights, dweights.view());

        let mut dlogits = Array2::<F>::zeros((b, k));
        if pass.mode == Mode::Train {
            let inv_tau = F::lit(1.0 / self.config.temperature);
            let bound = logit_bound::<F>();
            let soft = pass.trace.relaxed.as_ref().unwrap_or(&act.scores);
            ndarray::Zip::from(&mut dlogits)
                .and(&dscores)
                .and(soft)
                .and(&act.logits)
                .for_each(|dl, &ds, &sc, &l| {
                    if l.abs() < bound {
                        *dl += ds * sc * (F::one() - sc) * inv_tau;
                    }
                });
        }
        ndarray::Zip::from(&mut dlogits)
            .and(&grads.probs)
            .and(&act.probs)
            .for_each(|dl, &dp, &p| *dl += dp * p * (F::one() - p));

        // logits[b, j] = c[b, j] . t[j]
        for j in 0..k {
            let t = self.prototypes.value.row(j).to_owned();
            let dl_j = dlogits.column(j);
            let emb_j = act.embeddings.slice(s![.., j, ..]);
            let mut dt = self.prototypes.grad.row_mut(j);
            for bi in 0..b {
                let g = dl_j[bi];
                demb.slice_mut(s![bi, j, ..]).scaled_add(g, &t);
                dt.scaled_add(g, &emb_j.row(bi));
            }
        }

        let dfeats =
            self.heads
                .backward(&pass.trace.heads, pass.trace.features.view(), demb.view());
        self.backbone.backward(&pass.trace.backbone, dfeats.view());
    }

    /// Visits every trainable parameter in a stable order.
    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_, F>) {
        self.backbone.visit(f);
        self.heads.visit(f);
        f("prototypes", self.prototypes.slot());
        self.classifier.visit(f);
        self.decoder.visit(f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, slot: ParamSlot<'_, F>| slot.grad.fill(F::zero()));
    }

    /// `(name, shape)` of every parameter, in visiting order.
    pub fn param_shapes(&mut self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, slot| out.push((name.to_string(), slot.shape.clone())));
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Names of parameters containing NaN or infinity.
    pub fn non_finite_params(&mut self) -> Vec<String> {
        let mut bad = Vec::new();
        self.visit_params(&mut |name, slot| {
            if first_non_finite(slot.value.iter().copied()).is_some() {
                bad.push(name.to_string());
            }
        });
        bad
    }

    /// Copies parameters into another precision; the backbone must be trainable.
    pub fn cast<G: Real>(&self) -> Result<Lcbm<G>> {
        let mut src = self.clone();
        let mut dst = Lcbm::<G>::new(self.config.clone())?;
        let mut values: Vec<Vec<f64>> = Vec::new();
        src.visit_params(&mut |_, slot| {
            values.push(slot.value.iter().map(|v| v.to_f64_lossy()).collect())
        });
        let mut it = values.into_iter();
        dst.visit_params(&mut |_, slot| {
            let v = it.next().expect("identical architectures");
            slot.value
                .iter_mut()
                .zip(v)
                .for_each(|(d, s)| *d = G::lit(s));
        });
        Ok(dst)
    }
}

/// Combines predicted weights `(B, n, k)` with scores `(B, k)`:
/// `class_scores[b, i] = sum_j weights[b, i, j] * scores[b, j]`.
pub fn linear_combination<F: Real>(
    weights: Array3<F>,
    scores: ArrayView2<'_, F>,
) -> PredictionBundle<F> {
    let importances = &weights * &scores.insert_axis(Axis(1));
    let class_scores = importances.sum_axis(Axis(2));
    let predicted_class = class_scores
        .outer_iter()
        .map(|row| argmax(row.iter().copied()))
        .collect();
    PredictionBundle {
        weights,
        class_scores,
        importances,
        predicted_class,
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<F: Real>(values: impl IntoIterator<Item = F>) -> usize {
    let mut best = 0;
    let mut best_v = F::neg_infinity();
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
