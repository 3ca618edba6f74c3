//! Plug-in mutual information estimates for the information plane, in nats.
//!
//! Both quantities are sums of per-concept terms:
//! - `I(C;Y) = sum_j I(hard_j; Y)` from empirical joint counts;
//! - `I(C;X) = sum_j [H_b(mean_x pi_j(x)) - mean_x H_b(pi_j(x))]`, the
//!   information a Bernoulli(pi_j(x)) concept sample carries about `x`,
//!   treating each sample as its own condition.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this many samples the plug-in estimates are refused.
pub const MIN_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InformationPoint {
    /// `I(C;X)` in nats.
    pub i_cx: f64,
    /// `I(C;Y)` in nats.
    pub i_cy: f64,
}

fn xlnx(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// Entropy in nats of a Bernoulli(p).
pub fn bernoulli_entropy(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    -(xlnx(p) + xlnx(1.0 - p))
}

/// Plug-in entropy of a discrete sample.
pub fn entropy(values: &[usize]) -> f64 {
    let n = values.len() as f64;
    let mut counts = std::collections::HashMap::new();
    for &v in values {
        *counts.entry(v).or_insert(0usize) += 1;
    }
    -counts.values().map(|&c| xlnx(c as f64 / n)).sum::<f64>()
}

/// Plug-in mutual information between two discrete samples of equal length.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "paired samples");
    if a.is_empty() {
        return 0.0;
    }
    let n = a.len() as f64;
    let mut joint = std::collections::HashMap::new();
    let mut ma = std::collections::HashMap::new();
    let mut mb = std::collections::HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0usize) += 1;
        *ma.entry(x).or_insert(0usize) += 1;
        *mb.entry(y).or_insert(0usize) += 1;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            let px = ma[&x] as f64 / n;
            let py = mb[&y] as f64 / n;
            pxy * (pxy / (px * py)).ln()
        })
        .sum();
    mi.max(0.0)
}

fn check_count(n: usize) -> Result<()> {
    if n < MIN_SAMPLES {
        Err(Error::Estimator(format!(
            "{n} samples; at least {MIN_SAMPLES} are needed for plug-in estimates"
        )))
    } else {
        Ok(())
    }
}

/// `sum_j I(hard_j; Y)` for `(N, k)` binary scores.
pub fn concept_label_information(scores: ArrayView2<'_, f32>, labels: &[usize]) -> Result<f64> {
    check_count(scores.nrows())?;
    if labels.len() != scores.nrows() {
        return Err(Error::data("label count differs from score rows"));
    }
    Ok(scores
        .columns()
        .into_iter()
        .map(|col| {
            let bits: Vec<usize> = col.iter().map(|&s| usize::from(s > 0.5)).collect();
            mutual_information(&bits, labels)
        })
        .sum())
}

/// `sum_j [H_b(mean pi_j) - mean H_b(pi_j)]` for `(N, k)` probabilities.
pub fn concept_input_information(probs: ArrayView2<'_, f32>) -> Result<f64> {
    check_count(probs.nrows())?;
    let n = probs.nrows() as f64;
    Ok(probs
        .columns()
        .into_iter()
        .map(|col| {
            let mean = col.iter().map(|&p| f64::from(p)).sum::<f64>() / n;
            let cond = col
                .iter()
                .map(|&p| bernoulli_entropy(f64::from(p)))
                .sum::<f64>()
                / n;
            (bernoulli_entropy(mean) - cond).max(0.0)
        })
        .sum())
}

pub fn information_point(
    probs: ArrayView2<'_, f32>,
    scores: ArrayView2<'_, f32>,
    labels: &[usize],
) -> Result<InformationPoint> {
    Ok(InformationPoint {
        i_cx: concept_input_information(probs)?,
        i_cy: concept_label_information(scores, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_concept_contributes_nothing() {
        let probs = Array2::from_elem((200, 1), 1.0f32);
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        assert_eq!(concept_input_information(probs.view()).unwrap(), 0.0);
        assert_eq!(
            concept_label_information(probs.view(), &labels).unwrap(),
            0.0
        );
    }

    #[test]
    fn copy_of_balanced_label_carries_ln2() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 2).collect();
        let scores = Array2::from_shape_fn((1000, 1), |(i, _)| labels[i] as f32);
        let v = concept_label_information(scores.view(), &labels).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        // a deterministic encoder of a balanced bit has I(C;X) = ln 2 too
        assert!(
            (concept_input_information(scores.view()).unwrap() - std::f64::consts::LN_2).abs()
                < 1e-12
        );
    }

    #[test]
    fn too_few_samples_is_an_estimator_error() {
        let probs = Array2::from_elem((99, 2), 0.5f32);
        assert!(matches!(
            concept_input_information(probs.view()),
            Err(Error::Estimator(_))
        ));
    }

    #[test]
    fn plug_in_matches_exact_information_on_a_known_joint() {
        // P(a, b) over {0,1} x {0,1,2}
        let joint: [[f64; 3]; 2] = [[0.30, 0.10, 0.05], [0.05, 0.15, 0.35]];
        let pa: [f64; 2] = [0.45, 0.55];
        let pb = [0.35, 0.25, 0.40];
        let exact: f64 = (0..2)
            .flat_map(|a| (0..3).map(move |b| (a, b)))
            .map(|(a, b)| joint[a][b] * (joint[a][b] / (pa[a] * pb[b])).ln())
            .sum();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let cells: Vec<(usize, usize)> = (0..2).flat_map(|a| (0..3).map(move |b| (a, b))).collect();
        let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let mut u: f64 = rng.random();
            let mut pick = cells[cells.len() - 1];
            for &(a, b) in &cells {
                if u < joint[a][b] {
                    pick = (a, b);
                    break;
                }
                u -= joint[a][b];
            }
            xs.push(pick.0);
            ys.push(pick.1);
        }
        assert!((mutual_information(&xs, &ys) - exact).abs() < 1e-2);
    }

    #[test]
    fn entropies() {
        assert_eq!(bernoulli_entropy(0.0), 0.0);
        assert!((bernoulli_entropy(0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((entropy(&[0, 1, 2, 3]) - 4f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn label_information_is_bounded(
            seed in any::<u64>(), k in 1usize..5, classes in 2usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 150;
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let scores = Array2::from_shape_fn((n, k), |(i, j)| {
                if rng.random_bool(0.7) { ((labels[i] + j) % 2) as f32 } else { rng.random_range(0..2) as f32 }
            });
            let icy = concept_label_information(scores.view(), &labels).unwrap();
            let sum_h: f64 = scores.columns().into_iter().map(|c| {
                entropy(&c.iter().map(|&v| v as usize).collect::<Vec<_>>())
            }).sum();
            prop_assert!(icy >= 0.0);
            prop_assert!(icy <= sum_h + 1e-9);
            prop_assert!(icy <= k as f64 * entropy(&labels) + 1e-9);
        }

        #[test]
        fn input_information_is_non_negative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs = Array2::from_shape_fn((120, 3), |_| rng.random::<f32>());
            let v = concept_input_information(probs.view()).unwrap();
            prop_assert!((0.0..=3.0 * std::f64::consts::LN_2 + 1e-9).contains(&v));
        }
    }
}
