use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::ModelConfig;
use crate::data::TensorSource;

fn model(seed: u64) -> Lcbm<f32> {
    Lcbm::new(ModelConfig {
        seed,
        ..ModelConfig::tiny()
    })
    .unwrap()
}

fn source(n: usize, seed: u64, annotated: bool) -> TensorSource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Array4::from_shape_simple_fn((n, 3, 8, 8), || rng.random::<f32>());
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let concepts =
        annotated.then(|| Array2::from_shape_fn((n, 3), |(i, g)| u8::from((i + g) % 3 == 0)));
    TensorSource::new(images, labels, concepts, 2).unwrap()
}

#[test]
fn collect_matches_a_single_forward_pass() {
    let m = model(0);
    let src = source(37, 1, false);
    let opts = PassOptions {
        batch_size: 8,
        keep_embeddings: true,
        reconstruct: true,
    };
    let pass = collect(&m, &src, &opts).unwrap();
    let full = m.forward(src.images.view(), Mode::Eval, None).unwrap();
    assert_eq!(pass.predicted, full.prediction.predicted_class);
    for (a, b) in pass.probs.iter().zip(&full.activation.probs) {
        assert!((a - b).abs() < 1e-6);
    }
    assert_eq!(pass.embeddings.unwrap().dim(), (37, 2, 4));
    let mse = (&full.reconstruction - &src.images)
        .mapv(|e| f64::from(e * e))
        .mean()
        .unwrap();
    assert!((pass.sq_err_sum / pass.n_pixels as f64 - mse).abs() < 1e-6);
    assert!(pass.concepts.is_none());
}

#[test]
fn accuracy_and_mse_ranges() {
    let m = model(0);
    let src = source(50, 2, false);
    let acc = task_accuracy(&m, &src).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(reconstruction_error(&m, &src).unwrap() >= 0.0);
}

#[test]
fn empty_split_is_a_data_error() {
    let m = model(0);
    let src = source(0, 0, false);
    assert!(matches!(task_accuracy(&m, &src), Err(Error::Data(_))));
}

#[test]
fn alignment_metrics_need_annotations() {
    let m = model(0);
    let src = source(20, 0, false);
    assert!(matches!(concept_f1(&m, &src), Err(Error::Data(_))));
    assert!(matches!(
        cas(&m, &src, CasMode::Probability, &ProbeConfig::default()),
        Err(Error::Data(_))
    ));
}

#[test]
fn alignment_metrics_are_bounded() {
    let m = model(3);
    let src = source(60, 4, true);
    let f1 = concept_f1(&m, &src).unwrap().score;
    assert!((0.0..=1.0).contains(&f1));
    let c = cas(&m, &src, CasMode::Probability, &ProbeConfig::default())
        .unwrap()
        .score;
    assert!((0.0..=1.0).contains(&c));
}

#[test]
fn few_samples_refuse_information_estimates() {
    let m = model(0);
    assert!(matches!(
        information_point(&m, &source(99, 0, false)),
        Err(Error::Estimator(_))
    ));
    let pts = information_plane(&[model(0), model(1)], &source(120, 0, false)).unwrap();
    assert_eq!(pts.len(), 2);
    assert!(pts.iter().all(|p| p.i_cx >= 0.0 && p.i_cy >= 0.0));
}

#[test]
fn zero_flip_probability_reproduces_task_accuracy_exactly() {
    let m = model(5);
    let src = source(300, 6, false);
    let acc = task_accuracy(&m, &src).unwrap();
    let curve = negative_interventions(&m, &src, &[0.0], 3, 9).unwrap();
    assert_eq!(curve[0].draws, vec![acc; 3]);
    assert_eq!(curve[0].accuracy.to_bits(), acc.to_bits());
}

#[test]
fn full_flip_matches_a_manual_inversion() {
    let m = model(5);
    let src = source(40, 7, false);
    let curve = negative_interventions(&m, &src, &[1.0], 1, 0).unwrap();

    let act = m.encode(src.images.view(), Mode::Eval, None).unwrap();
    let mut emb = act.embeddings.clone();
    let scores = act.scores.mapv(|s| 1.0 - s);
    for ((b, j), &s) in scores.indexed_iter() {
        if s == 1.0 {
            emb.slice_mut(ndarray::s![b, j, ..])
                .assign(&m.prototypes().row(j));
        }
    }
    let pred = m.classify(emb.view(), scores.view()).unwrap();
    let hits = pred
        .predicted_class
        .iter()
        .zip(&src.labels)
        .filter(|(p, l)| p == l)
        .count();
    assert_eq!(curve[0].accuracy, hits as f64 / 40.0);
}

#[test]
fn interventions_are_seeded_and_validated() {
    let m = model(1);
    let src = source(64, 8, false);
    let grid = [0.0, 0.5, 1.0];
    let a = negative_interventions(&m, &src, &grid, 2, 11).unwrap();
    let b = negative_interventions(&m, &src, &grid, 2, 11).unwrap();
    assert_eq!(a, b);
    assert!(matches!(
        negative_interventions(&m, &src, &[1.5], 2, 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        negative_interventions(&m, &src, &[-0.1], 2, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn f1_is_invariant_to_concept_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ann = Array2::from_shape_fn((80, 4), |_| u8::from(rng.random_bool(0.4)));
    let learned = Array2::from_shape_fn((80, 5), |(i, j)| {
        if j < 4 && rng.random_bool(0.8) {
            ann[[i, j]]
        } else {
            u8::from(rng.random_bool(0.5))
        }
    });
    let perm = [3, 0, 4, 1, 2];
    let permuted = Array2::from_shape_fn((80, 5), |(i, j)| learned[[i, perm[j]]]);
    let a = alignment::concept_f1_from(ann.view(), learned.view())
        .unwrap()
        .score;
    let b = alignment::concept_f1_from(ann.view(), permuted.view())
        .unwrap()
        .score;
    assert_eq!(a, b);
    let probs = learned.mapv(|v| f32::from(v) * 0.7 + 0.1);
    let pprobs = permuted.mapv(|v| f32::from(v) * 0.7 + 0.1);
    let a = alignment::cas_from_probs(ann.view(), probs.view())
        .unwrap()
        .score;
    let b = alignment::cas_from_probs(ann.view(), pprobs.view())
        .unwrap()
        .score;
    assert_eq!(a, b);
}
