//! Binary-concrete relaxation of Bernoulli concept scores.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Real};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-6;

/// `logit(1 - PROB_EPS)`; logits are clamped to `±` this value.
pub fn logit_bound<F: Real>() -> F {
    F::lit(((1.0 - PROB_EPS) / PROB_EPS).ln())
}

fn logit<F: Real>(p: F) -> F {
    let eps = F::lit(PROB_EPS);
    let p = p.max(eps).min(F::one() - eps);
    (p / (F::one() - p)).ln()
}

/// Uniform noise in `[PROB_EPS, 1 - PROB_EPS]`, shaped `(batch, k)`.
pub fn draw_noise<F: Real, R: Rng + ?Sized>(batch: usize, k: usize, rng: &mut R) -> Array2<F> {
    Array2::from_shape_simple_fn((batch, k), || {
        F::lit(rng.random::<f64>().clamp(PROB_EPS, 1.0 - PROB_EPS))
    })
}

/// Relaxed scores from logits: `sigmoid((clamp(l) + logit(u)) / tau)`.
pub fn relaxed_scores<F: Real>(
    logits: ArrayView2<'_, F>,
    noise: ArrayView2<'_, F>,
    tau: f64,
) -> Result<Array2<F>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let bound = logit_bound::<F>();
    let inv_tau = F::lit(1.0 / tau);
    let mut out = Array2::zeros(logits.raw_dim());
    Zip::from(&mut out)
        .and(&logits)
        .and(&noise)
        .for_each(|o, &l, &u| {
            let l = l.max(-bound).min(bound);
            *o = sigmoid((l + logit(u)) * inv_tau);
        });
    Ok(out)
}

/// Concept scores from probabilities.
///
/// Train mode applies the binary-concrete relaxation with the given uniform
/// noise; eval mode thresholds at 0.5 and ignores the noise.
pub fn sample_scores<F: Real>(
    probs: ArrayView2<'_, F>,
    tau: f64,
    mode: Mode,
    noise: Option<ArrayView2<'_, F>>,
) -> Result<Array2<F>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    match mode {
        Mode::Eval => Ok(probs.mapv(|p| if p > F::lit(0.5) { F::one() } else { F::zero() })),
        Mode::Train => {
            let noise = noise.ok_or_else(|| Error::config("train-mode sampling requires noise"))?;
            if noise.dim() != probs.dim() {
                return Err(Error::config("noise and probability shapes differ"));
            }
            let logits = probs.mapv(logit);
            relaxed_scores(logits.view(), noise, tau)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn eval_mode_thresholds_at_one_half() {
        let p = array![[0.7f64, 0.5, 0.2, 0.500001]];
        let s = sample_scores(p.view(), 1.0, Mode::Eval, None).unwrap();
        assert_eq!(s, array![[1.0, 0.0, 0.0, 1.0]]);
    }

    #[test]
    fn symmetric_point_maps_to_one_half() {
        let p = array![[0.5f64]];
        let u = array![[0.5f64]];
        for tau in [0.1, 1.0, 7.0] {
            let s = sample_scores(p.view(), tau, Mode::Train, Some(u.view())).unwrap();
            assert!((s[[0, 0]] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_relaxation() {
        // sigmoid(ln 9) = 0.9
        let p = array![[0.9f64]];
        let u = array![[0.5f64]];
        let s = sample_scores(p.view(), 1.0, Mode::Train, Some(u.view())).unwrap();
        assert!((s[[0, 0]] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_temperature() {
        let p = array![[0.5f64]];
        assert!(matches!(
            sample_scores(p.view(), 0.0, Mode::Eval, None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            relaxed_scores(p.view(), p.view(), -1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn train_mode_requires_noise() {
        let p = array![[0.5f64]];
        assert!(sample_scores(p.view(), 1.0, Mode::Train, None).is_err());
    }

    proptest! {
        // Low temperature pushes scores to {0, 1} when the logit is away from 0.
        #[test]
        fn low_temperature_limit(l in prop_oneof![-12.0f64..-1.0, 1.0f64..12.0], u in 0.05f64..0.95) {
            let logits = array![[l]];
            let noise = array![[u]];
            let s = relaxed_scores(logits.view(), noise.view(), 0.01).unwrap()[[0, 0]];
            let z = l + (u / (1.0 - u)).ln();
            prop_assume!(z.abs() > 0.1);
            let target = if z > 0.0 { 1.0 } else { 0.0 };
            prop_assert!((s - target).abs() < 1e-3);
        }

        // Clamped logits keep the argument within about ±27.6, which f64
        // resolves strictly inside (0, 1) for tau >= 1.
        #[test]
        fn relaxed_scores_stay_in_open_unit_interval(l in -30.0f64..30.0, u in 1e-6f64..(1.0 - 1e-6), tau in 1.0f64..5.0) {
            let s = relaxed_scores(array![[l]].view(), array![[u]].view(), tau).unwrap()[[0, 0]];
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
