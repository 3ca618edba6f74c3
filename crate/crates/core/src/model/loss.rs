//! Weighted negative ELBO: reconstruction MSE + task cross-entropy + batch-prior KL.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use serde::{Deserialize, Serialize};

use super::sampling::PROB_EPS;
use super::{ConceptActivation, OutputGrads, PredictionBundle};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean squared reconstruction error.
    pub rec: f64,
    /// Mean categorical cross-entropy.
    pub task: f64,
    /// KL between batch-averaged concept activations and the prior.
    pub kl: f64,
    /// `w_rec * rec + w_task * task + w_kl * kl`.
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(rec: f64, task: f64, kl: f64, config: &ModelConfig) -> Self {
        Self {
            rec,
            task,
            kl,
            total: config.w_rec * rec + config.w_task * task + config.w_kl * kl,
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("rec", self.rec),
            ("task", self.task),
            ("kl", self.kl),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::non_finite(format!("loss term `{name}`")));
            }
        }
        Ok(())
    }

    /// Running mean helper used by the training loop.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.rec += other.rec * weight;
        self.task += other.task * weight;
        self.kl += other.kl * weight;
        self.total += other.total * weight;
    }
}

fn bernoulli_kl(p: f64, alpha: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    p * (p / alpha).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - alpha)).ln()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!(
            "prior must lie in (0, 1), got {alpha}"
        )))
    }
}

/// Sum over concepts of `KL(Bern(mean_b probs[b, j]) || Bern(alpha))`.
pub fn batch_kl<F: Real>(probs: ArrayView2<'_, F>, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if probs.nrows() == 0 {
        return Err(Error::data("batch_kl needs at least one sample"));
    }
    let b = probs.nrows() as f64;
    let kl = probs
        .columns()
        .into_iter()
        .map(|col| {
            let mean = col.iter().map(|p| p.to_f64_lossy()).sum::<f64>() / b;
            bernoulli_kl(mean, alpha)
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

fn batch_kl_grad<F: Real>(probs: ArrayView2<'_, F>, alpha: f64, weight: f64) -> Array2<F> {
    let b = probs.nrows() as f64;
    let mut grad = Array2::zeros(probs.raw_dim());
    for (j, col) in probs.columns().into_iter().enumerate() {
        let mean = col.iter().map(|p| p.to_f64_lossy()).sum::<f64>() / b;
        if mean <= PROB_EPS || mean >= 1.0 - PROB_EPS {
            continue;
        }
        let g = (mean / alpha).ln() - ((1.0 - mean) / (1.0 - alpha)).ln();
        grad.column_mut(j).fill(F::lit(weight * g / b));
    }
    grad
}

fn check_labels(labels: &[usize], n_classes: usize, batch: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::data(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::data(format!("label {bad} outside [0, {n_classes})")));
    }
    Ok(())
}

/// Per-row log-softmax in f64.
fn log_softmax<F: Real>(scores: ArrayView2<'_, F>) -> Array2<f64> {
    let mut out = scores.mapv(|v| v.to_f64_lossy());
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn mse<F: Real>(a: ArrayView4<'_, F>, b: ArrayView4<'_, F>) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / n
}

/// The three loss terms and their weighted total.
pub fn elbo_loss<F: Real>(
    images: ArrayView4<'_, F>,
    labels: &[usize],
    activation: &ConceptActivation<F>,
    prediction: &PredictionBundle<F>,
    reconstruction: ArrayView4<'_, F>,
    config: &ModelConfig,
) -> Result<LossBreakdown> {
    let b = images.dim().0;
    check_labels(labels, config.n_classes, b)?;
    if reconstruction.dim() != images.dim() {
        return Err(Error::config("reconstruction and image shapes differ"));
    }
    let rec = mse(images, reconstruction);
    let logp = log_softmax(prediction.class_scores.view());
    let task = -labels
        .iter()
        .enumerate()
        .map(|(i, &y)| logp[[i, y]])
        .sum::<f64>()
        / b as f64;
    let kl = batch_kl(activation.probs.view(), config.prior)?;
    let loss = LossBreakdown::new(rec, task.max(0.0), kl, config);
    loss.check_finite()?;
    Ok(loss)
}

/// Loss plus its gradient with respect to reconstruction, class scores and probabilities.
pub fn elbo_loss_and_grads<F: Real>(
    images: ArrayView4<'_, F>,
    labels: &[usize],
    activation: &ConceptActivation<F>,
    prediction: &PredictionBundle<F>,
    reconstruction: ArrayView4<'_, F>,
    config: &ModelConfig,
) -> Result<(LossBreakdown, OutputGrads<F>)> {
    let loss = elbo_loss(
        images,
        labels,
        activation,
        prediction,
        reconstruction,
        config,
    )?;
    let b = images.dim().0 as f64;

    let scale = F::lit(2.0 * config.w_rec / images.len() as f64);
    let mut d_rec: Array4<F> = &reconstruction - &images;
    d_rec.mapv_inplace(|v| v * scale);

    let logp = log_softmax(prediction.class_scores.view());
    let mut d_cs = logp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        d_cs[[i, y]] -= 1.0;
    }
    let d_cs = d_cs.mapv(|v| F::lit(v * config.w_task / b));

    let d_probs = batch_kl_grad(activation.probs.view(), config.prior, config.w_kl);
    Ok((
        loss,
        OutputGrads {
            reconstruction: d_rec,
            class_scores: d_cs,
            probs: d_probs,
        },
    ))
}

/// Fraction of rows whose argmax equals the label.
pub fn batch_accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / predicted.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array, Array3, Axis};
    use proptest::prelude::*;

    #[test]
    fn kl_vanishes_at_the_prior() {
        let probs = Array2::from_elem((5, 3), 0.2f64);
        assert!(batch_kl(probs.view(), 0.2).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_spot_value() {
        // 0.5 ln 2.5 + 0.5 ln 0.625
        let expected = 0.5 * 2.5f64.ln() + 0.5 * 0.625f64.ln();
        assert!((expected - 0.22314).abs() < 1e-5);
        let probs = array![[0.9f64], [0.1]];
        assert!((batch_kl(probs.view(), 0.2).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_bad_prior() {
        let probs = array![[0.5f64]];
        for a in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(batch_kl(probs.view(), a), Err(Error::Config(_))));
        }
    }

    #[test]
    fn batch_level_prior_permits_confident_samples() {
        // Half the batch certain-on, half certain-off: mean 0.5. Per-sample KL
        // would be enormous; the batch form only sees the mean.
        let confident = array![[1.0 - 1e-6f64], [1e-6], [1.0 - 1e-6], [1e-6], [1e-6]];
        let batch = batch_kl(confident.view(), 0.4).unwrap();
        let per_sample: f64 = confident.iter().map(|&p| bernoulli_kl(p, 0.4)).sum::<f64>() / 5.0;
        assert!(batch < 1e-9);
        assert!(per_sample > 0.5);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let probs = array![[0.3f64, 0.8], [0.6, 0.4], [0.1, 0.9]];
        let g = batch_kl_grad(probs.view(), 0.2, 1.0);
        let h = 1e-7;
        for i in 0..3 {
            for j in 0..2 {
                let mut p = probs.clone();
                p[[i, j]] += h;
                let up = batch_kl(p.view(), 0.2).unwrap();
                p[[i, j]] -= 2.0 * h;
                let down = batch_kl(p.view(), 0.2).unwrap();
                assert!(((up - down) / (2.0 * h) - g[[i, j]]).abs() < 1e-6);
            }
        }
    }

    fn toy_bundle(scores: Array2<f64>) -> PredictionBundle<f64> {
        let (b, n) = scores.dim();
        PredictionBundle {
            weights: Array3::zeros((b, n, 1)),
            importances: Array3::zeros((b, n, 1)),
            predicted_class: vec![0; b],
            class_scores: scores,
        }
    }

    fn toy_activation(probs: Array2<f64>) -> ConceptActivation<f64> {
        let (b, k) = probs.dim();
        ConceptActivation {
            embeddings: Array3::zeros((b, k, 1)),
            logits: probs.mapv(|p| (p / (1.0 - p)).ln()),
            scores: probs.clone(),
            probs,
        }
    }

    #[test]
    fn total_is_weighted_sum_and_limit_is_zero() {
        let mut config = ModelConfig::new(1, 2, [1, 4, 4]);
        config.w_rec = 2.0;
        config.w_task = 0.5;
        config.w_kl = 3.0;
        let images =
            Array::from_shape_fn((2, 1, 4, 4), |(b, _, h, w)| ((b + h + w) % 3) as f64 / 3.0);
        let act = toy_activation(array![[0.2], [0.2]]);
        // Huge margins toward the correct class drive cross-entropy to zero.
        let bundle = toy_bundle(array![[200.0, -200.0], [-200.0, 200.0]]);
        let loss = elbo_loss(
            images.view(),
            &[0, 1],
            &act,
            &bundle,
            images.view(),
            &config,
        )
        .unwrap();
        assert_eq!(loss.rec, 0.0);
        assert!(loss.task < 1e-12);
        assert!(loss.kl < 1e-12);
        assert!(loss.total.abs() < 1e-10);

        let rec = images.mapv(|v| 1.0 - v);
        let bundle = toy_bundle(array![[0.3, 0.1], [1.0, -2.0]]);
        let act = toy_activation(array![[0.7], [0.4]]);
        let loss = elbo_loss(images.view(), &[0, 1], &act, &bundle, rec.view(), &config).unwrap();
        let expected = 2.0 * loss.rec + 0.5 * loss.task + 3.0 * loss.kl;
        assert!((loss.total - expected).abs() < 1e-12);
        assert!(loss.rec > 0.0 && loss.task > 0.0 && loss.kl > 0.0);
    }

    #[test]
    fn rejects_labels_out_of_range() {
        let config = ModelConfig::new(1, 2, [1, 4, 4]);
        let images = Array4::<f64>::zeros((1, 1, 4, 4));
        let act = toy_activation(array![[0.5]]);
        let bundle = toy_bundle(array![[0.0, 0.0]]);
        let err =
            elbo_loss(images.view(), &[2], &act, &bundle, images.view(), &config).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    proptest! {
        #[test]
        fn kl_is_permutation_invariant(values in proptest::collection::vec(0.001f64..0.999, 12), seed in 0u64..1000) {
            let probs = Array2::from_shape_vec((6, 2), values).unwrap();
            let mut order: Vec<usize> = (0..6).collect();
            // deterministic shuffle from seed
            let mut s = seed;
            for i in (1..6).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (s >> 33) as usize % (i + 1));
            }
            let permuted = probs.select(Axis(0), &order);
            let a = batch_kl(probs.view(), 0.2).unwrap();
            let b = batch_kl(permuted.view(), 0.2).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0);
        }
    }
}
