//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use lcbm_core::model::loss::elbo_loss_and_grads;
use lcbm_core::train::{stream_rng, SeedPlan, Stream};
use lcbm_core::{elbo_loss, Lcbm, Mode, ModelConfig, SampleSource};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Result of comparing analytic gradients with central differences.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Relative error with a floor so entries that are zero up to rounding
/// are compared absolutely.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Checks every parameter of the tiny f64 model against central differences.
pub fn tiny_gradient_check(seed: u64, h: f64) -> GradCheck {
    let mut cfg = ModelConfig::tiny();
    cfg.seed = seed;
    let mut model = Lcbm::<f64>::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let [c, hh, ww] = cfg.image_shape;
    let images = Array4::from_shape_simple_fn((2, c, hh, ww), || rng.random::<f64>());
    let labels = [0usize, 1];
    let noise: Array2<f64> = model.draw_noise(2, &mut rng);

    let loss_of = |m: &Lcbm<f64>| {
        let pass = m
            .forward(images.view(), Mode::Train, Some(noise.view()))
            .unwrap();
        elbo_loss(
            images.view(),
            &labels,
            &pass.activation,
            &pass.prediction,
            pass.reconstruction.view(),
            &cfg,
        )
        .unwrap()
        .total
    };

    let pass = model
        .forward(images.view(), Mode::Train, Some(noise.view()))
        .unwrap();
    let (_, grads) = elbo_loss_and_grads(
        images.view(),
        &labels,
        &pass.activation,
        &pass.prediction,
        pass.reconstruction.view(),
        &cfg,
    )
    .unwrap();
    model.zero_grad();
    model.backward(&pass, &grads);

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, slot| analytic.push((name.to_string(), slot.grad.to_vec())));

    let mut out = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (p, (name, grad)) in analytic.iter().enumerate() {
        for (e, &a) in grad.iter().enumerate() {
            let eval_at = |delta: f64| {
                let mut probe = model.clone();
                let mut idx = 0;
                probe.visit_params(&mut |_, slot| {
                    if idx == p {
                        slot.value[e] += delta;
                    }
                    idx += 1;
                });
                loss_of(&probe)
            };
            let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            let err = rel_err(a, numeric);
            out.checked += 1;
            if err > out.max_rel_err {
                out.max_rel_err = err;
                out.worst = format!("{name}[{e}]: analytic {a:.6e} numeric {numeric:.6e}");
            }
        }
    }
    out
}

/// Best assignment by trying every permutation: `(objective, column per row)`.
///
/// The objective is summed in row order, so it is comparable bit for bit
/// with any other row-order sum over the same entries.
pub fn brute_force_assignment(scores: &Array2<f64>, maximize: bool) -> (f64, Vec<usize>) {
    fn walk(
        scores: &Array2<f64>,
        row: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<usize>,
        best: &mut Option<(f64, Vec<usize>)>,
        maximize: bool,
    ) {
        let n = scores.nrows();
        if row == n {
            let total = row_order_sum(scores, current);
            let better = match best {
                None => true,
                Some((b, _)) => (maximize && total > *b) || (!maximize && total < *b),
            };
            if better {
                *best = Some((total, current.clone()));
            }
            return;
        }
        for col in 0..scores.ncols() {
            if !used[col] {
                used[col] = true;
                current.push(col);
                walk(scores, row + 1, used, current, best, maximize);
                current.pop();
                used[col] = false;
            }
        }
    }
    let mut best = None;
    walk(
        scores,
        0,
        &mut vec![false; scores.ncols()],
        &mut Vec::new(),
        &mut best,
        maximize,
    );
    best.expect("non-empty matrix")
}

/// `sum_r scores[r, cols[r]]`, accumulated in row order.
pub fn row_order_sum(scores: &Array2<f64>, cols: &[usize]) -> f64 {
    cols.iter()
        .enumerate()
        .fold(0.0, |acc, (r, &c)| acc + scores[[r, c]])
}

/// Exact mutual information in nats of a joint probability table.
pub fn exact_mutual_information(joint: &[Vec<f64>]) -> f64 {
    let pa: Vec<f64> = joint.iter().map(|row| row.iter().sum()).collect();
    let pb: Vec<f64> = (0..joint[0].len())
        .map(|j| joint.iter().map(|row| row[j]).sum())
        .collect();
    let mut mi = 0.0;
    for (i, row) in joint.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    mi
}

/// `n` i.i.d. draws `(a, b)` from a joint probability table.
pub fn sample_joint(joint: &[Vec<f64>], n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let cells: Vec<(usize, usize, f64)> = joint
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, &p)| (i, j, p)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let mut u: f64 = rng.random();
        let mut pick = cells.last().expect("non-empty table");
        for cell in &cells {
            if u < cell.2 {
                pick = cell;
                break;
            }
            u -= cell.2;
        }
        a.push(pick.0);
        b.push(pick.1);
    }
    (a, b)
}

/// Bernoulli KL divergence written out term by term.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

/// Loss of the first training batch of a run, built from the run seed alone.
pub fn first_batch_loss(
    run_seed: u64,
    data: &dyn SampleSource,
    base: &ModelConfig,
    batch_size: usize,
) -> f64 {
    let plan = SeedPlan::new(run_seed);
    let cfg = ModelConfig {
        seed: plan.init,
        ..base.clone()
    };
    let model = Lcbm::<f32>::new(cfg.clone()).unwrap();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream_rng(plan.run, Stream::Shuffle));
    let batch = data.batch(&order[..batch_size]).unwrap();
    let noise = model.draw_noise(batch_size, &mut stream_rng(plan.run, Stream::Noise));
    let pass = model
        .forward(batch.images.view(), Mode::Train, Some(noise.view()))
        .unwrap();
    elbo_loss(
        batch.images.view(),
        &batch.labels,
        &pass.activation,
        &pass.prediction,
        pass.reconstruction.view(),
        &cfg,
    )
    .unwrap()
    .total
}
