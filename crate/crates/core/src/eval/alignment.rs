//! Concept alignment between learned concepts and ground-truth annotations.
//!
//! Both metrics build a ground-truth x learned score matrix, match it with
//! the Hungarian algorithm and macro-average the matched entries.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hungarian::{hungarian_match, AssignmentResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    /// Macro mean over matched pairs.
    pub score: f64,
    pub assignment: AssignmentResult,
    /// Ground-truth concepts left out because they were constant.
    #[serde(default)]
    pub excluded: Vec<usize>,
}

/// F1 of a binary prediction against a binary target; 0 when undefined.
pub fn binary_f1(truth: ArrayView1<'_, u8>, pred: ArrayView1<'_, u8>) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&t, &p) in truth.iter().zip(pred.iter()) {
        match (t != 0, p != 0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fnn += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn check_rows(annotations: &ArrayView2<'_, u8>, n: usize) -> Result<()> {
    if annotations.nrows() != n {
        return Err(Error::data(format!(
            "{} annotation rows for {n} predictions",
            annotations.nrows()
        )));
    }
    if n == 0 {
        return Err(Error::data("alignment needs at least one sample"));
    }
    Ok(())
}

/// Hungarian-matched macro F1 between `(N, m)` annotations and `(N, k)` hard scores.
pub fn concept_f1_from(
    annotations: ArrayView2<'_, u8>,
    scores: ArrayView2<'_, u8>,
) -> Result<AlignmentScore> {
    check_rows(&annotations, scores.nrows())?;
    let m = Array2::from_shape_fn((annotations.ncols(), scores.ncols()), |(g, j)| {
        binary_f1(annotations.column(g), scores.column(j))
    });
    matched_mean(m, Vec::new())
}

fn matched_mean(matrix: Array2<f64>, excluded: Vec<usize>) -> Result<AlignmentScore> {
    let assignment = hungarian_match(matrix.view(), true)?;
    let n = assignment.pairs.len();
    let score = if n == 0 {
        0.0
    } else {
        assignment.objective / n as f64
    };
    Ok(AlignmentScore {
        score,
        assignment,
        excluded,
    })
}

/// Area under the ROC curve of `signal` for the positive labels, with
/// average ranks for ties. `None` when either class is absent.
pub fn roc_auc(signal: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..signal.len()).collect();
    order.sort_by(|&a, &b| signal[a].total_cmp(&signal[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && signal[order[j + 1]] == signal[order[i]] {
            j += 1;
        }
        // 1-based average rank of the tie block
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if labels[o] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// `2 |AUC - 0.5|`: 1 for a perfect (or perfectly inverted) ranking, 0 for chance.
pub fn auc_alignment(auc: f64) -> f64 {
    2.0 * (auc - 0.5).abs()
}

/// Ground-truth rows that have both classes present, plus the excluded ones.
fn informative_rows(annotations: &ArrayView2<'_, u8>) -> (Vec<usize>, Vec<usize>) {
    let n = annotations.nrows();
    (0..annotations.ncols()).partition(|&g| {
        let pos = annotations.column(g).iter().filter(|&&v| v != 0).count();
        pos > 0 && pos < n
    })
}

fn alignment_matrix(
    annotations: &ArrayView2<'_, u8>,
    k: usize,
    mut signal: impl FnMut(usize, &[bool]) -> Result<f64>,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let (rows, excluded) = informative_rows(annotations);
    for g in &excluded {
        log::warn!("ground-truth concept {g} is constant over the split; excluded from alignment");
    }
    let mut m = Array2::zeros((rows.len(), k));
    for (r, &g) in rows.iter().enumerate() {
        let labels: Vec<bool> = annotations.column(g).iter().map(|&v| v != 0).collect();
        for j in 0..k {
            m[[r, j]] = signal(j, &labels)?;
        }
    }
    Ok((m, excluded))
}

/// Matched alignment score from `(N, k)` activation probabilities.
///
/// Matching is done on the informative ground-truth rows only; the reported
/// assignment rows index into that reduced set, see `excluded`.
pub fn cas_from_probs(
    annotations: ArrayView2<'_, u8>,
    probs: ArrayView2<'_, f32>,
) -> Result<AlignmentScore> {
    check_rows(&annotations, probs.nrows())?;
    let cols: Vec<Vec<f64>> = probs
        .columns()
        .into_iter()
        .map(|c| c.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let (m, excluded) = alignment_matrix(&annotations, probs.ncols(), |j, labels| {
        Ok(roc_auc(&cols[j], labels).map_or(0.0, auc_alignment))
    })?;
    matched_mean(m, excluded)
}

/// Settings for the embedding-probe variant of the alignment score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub folds: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Samples used at most; a seeded subset is drawn above this.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 3,
            epochs: 200,
            learning_rate: 0.5,
            max_samples: 2000,
            seed: 0,
        }
    }
}

/// Full-batch logistic regression on standardized features.
fn fit_logistic(x: &Array2<f64>, y: &[f64], epochs: usize, lr: f64) -> (ndarray::Array1<f64>, f64) {
    let (n, d) = x.dim();
    let mut w = ndarray::Array1::zeros(d);
    let mut b = 0.0;
    for _ in 0..epochs {
        let z = x.dot(&w) + b;
        let resid: ndarray::Array1<f64> = z
            .iter()
            .zip(y)
            .map(|(&z, &t)| crate::nn::sigmoid(z) - t)
            .collect();
        let gw = x.t().dot(&resid) / n as f64;
        let gb = resid.sum() / n as f64;
        w.scaled_add(-lr, &gw);
        b -= lr * gb;
    }
    (w, b)
}

/// Out-of-fold probe outputs for one `(N, d)` embedding column.
fn probe_signal(x: &Array2<f64>, labels: &[bool], cfg: &ProbeConfig, folds: &[usize]) -> Vec<f64> {
    let n = x.nrows();
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    let mut out = vec![0.0; n];
    for f in 0..cfg.folds {
        let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
        if train.is_empty() || test.is_empty() {
            continue;
        }
        let xt = x.select(Axis(0), &train);
        let mean = xt.mean_axis(Axis(0)).expect("non-empty");
        let std = xt
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-8 { s } else { 1.0 });
        let xt = (&xt - &mean) / &std;
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let (w, b) = fit_logistic(&xt, &yt, cfg.epochs, cfg.learning_rate);
        let xs = (&x.select(Axis(0), &test) - &mean) / &std;
        for (&i, z) in test.iter().zip(xs.dot(&w)) {
            out[i] = z + b;
        }
    }
    out
}

/// Alignment score where each pair's signal is a cross-validated linear probe
/// from embedding `c_j` to ground-truth concept `g`.
pub fn cas_from_embeddings(
    annotations: ArrayView2<'_, u8>,
    embeddings: ArrayView3<'_, f32>,
    cfg: &ProbeConfig,
) -> Result<AlignmentScore> {
    check_rows(&annotations, embeddings.dim().0)?;
    if cfg.folds < 2 {
        return Err(Error::config("probe needs at least two folds"));
    }
    let n = embeddings.dim().0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut keep: Vec<usize> = (0..n).collect();
    if n > cfg.max_samples {
        keep.shuffle(&mut rng);
        keep.truncate(cfg.max_samples);
        keep.sort_unstable();
    }
    let ann = annotations.select(Axis(0), &keep);
    let emb = embeddings.select(Axis(0), &keep);
    let mut folds: Vec<usize> = (0..keep.len()).map(|i| i % cfg.folds).collect();
    folds.shuffle(&mut rng);
    let k = emb.dim().1;
    let per_concept: Vec<Array2<f64>> = (0..k)
        .map(|j| emb.index_axis(Axis(1), j).mapv(f64::from))
        .collect();
    let (m, excluded) = alignment_matrix(&ann.view(), k, |j, labels| {
        let signal = probe_signal(&per_concept[j], labels, cfg, &folds);
        Ok(roc_auc(&signal, labels).map_or(0.0, auc_alignment))
    })?;
    matched_mean(m, excluded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn one_hot(digits: &[usize], m: usize) -> Array2<u8> {
        Array2::from_shape_fn((digits.len(), m), |(i, g)| u8::from(digits[i] == g))
    }

    #[test]
    fn f1_definitions() {
        let t = array![1u8, 1, 0, 0];
        assert_eq!(binary_f1(t.view(), array![1u8, 1, 0, 0].view()), 1.0);
        assert_eq!(binary_f1(t.view(), array![0u8, 0, 0, 0].view()), 0.0);
        assert_eq!(binary_f1(array![0u8, 0].view(), array![0u8, 0].view()), 0.0);
        // tp 1, fp 1, fn 1
        assert!((binary_f1(t.view(), array![1u8, 0, 1, 0].view()) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn permuted_scores_give_perfect_f1() {
        let digits: Vec<usize> = (0..50).map(|i| (i * 7) % 10).collect();
        let ann = one_hot(&digits, 10);
        let perm = [3, 0, 9, 1, 8, 2, 7, 4, 6, 5];
        let scores = Array2::from_shape_fn((50, 10), |(i, j)| ann[[i, perm[j]]]);
        let r = concept_f1_from(ann.view(), scores.view()).unwrap();
        assert_eq!(r.score, 1.0);
        for (g, j) in &r.assignment.pairs {
            assert_eq!(perm[*j], *g);
        }
        let zeros = Array2::<u8>::zeros((50, 10));
        assert_eq!(
            concept_f1_from(ann.view(), zeros.view()).unwrap().score,
            0.0
        );
    }

    #[test]
    fn auc_values() {
        let labels = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels), Some(1.0));
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels), Some(0.0));
        assert_eq!(roc_auc(&[0.5; 4], &labels), Some(0.5));
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &labels), Some(0.75));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), None);
        assert_eq!(auc_alignment(0.0), 1.0);
        assert_eq!(auc_alignment(0.5), 0.0);
    }

    #[test]
    fn perfect_ranking_gives_full_alignment_and_constants_are_excluded() {
        let digits: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let ann = one_hot(&digits, 5); // digit 4 never occurs
        let probs =
            Array2::from_shape_fn((40, 4), |(i, j)| if digits[i] == j { 0.9f32 } else { 0.1 });
        let r = cas_from_probs(ann.view(), probs.view()).unwrap();
        assert_eq!(r.excluded, vec![4]);
        assert!((r.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_signal_aligns_near_zero() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4000;
        let ann = Array2::from_shape_fn((n, 1), |_| u8::from(rng.random_bool(0.5)));
        let probs = Array2::from_shape_fn((n, 1), |_| rng.random::<f32>());
        let r = cas_from_probs(ann.view(), probs.view()).unwrap();
        assert!(r.score < 0.06, "{}", r.score);
    }

    #[test]
    fn probe_recovers_linearly_encoded_concepts() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 300;
        let digits: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let ann = one_hot(&digits, 3);
        // concept j's embedding carries digit (j + 1) % 3 in its first coordinate
        let emb = Array3::from_shape_fn((n, 3, 4), |(i, j, c)| {
            let noise = rng.random::<f32>() * 0.1;
            if c == 0 && digits[i] == (j + 1) % 3 {
                1.0 + noise
            } else {
                noise
            }
        });
        let cfg = ProbeConfig {
            epochs: 100,
            ..ProbeConfig::default()
        };
        let r = cas_from_embeddings(ann.view(), emb.view(), &cfg).unwrap();
        assert!(r.score > 0.95, "{}", r.score);
        for &(g, j) in &r.assignment.pairs {
            assert_eq!(g, (j + 1) % 3);
        }
    }

    #[test]
    fn row_count_mismatch_is_a_data_error() {
        let ann = Array2::<u8>::zeros((3, 2));
        let s = Array2::<u8>::zeros((4, 2));
        assert!(matches!(
            concept_f1_from(ann.view(), s.view()),
            Err(Error::Data(_))
        ));
    }

    proptest! {
        #[test]
        fn f1_is_invariant_to_concept_relabeling(
            bits in prop::collection::vec(any::<bool>(), 60),
            seed in any::<u64>(),
        ) {
            let scores = Array2::from_shape_fn((12, 5), |(i, j)| u8::from(bits[i * 5 + j]));
            let ann = Array2::from_shape_fn((12, 4), |(i, g)| u8::from(bits[(i * 5 + g + 3) % 60]));
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let permuted = Array2::from_shape_fn((12, 5), |(i, j)| scores[[i, perm[j]]]);
            let a = concept_f1_from(ann.view(), scores.view()).unwrap().score;
            let b = concept_f1_from(ann.view(), permuted.view()).unwrap().score;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
