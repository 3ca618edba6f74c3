use crate::model::Lcbm;
use crate::nn::Real;

/// Adaptive-moment optimizer with decoupled weight decay.
///
/// Moment buffers follow the model's parameter visiting order, which is fixed.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held by `model`.
    pub fn step<F: Real>(&mut self, model: &mut Lcbm<F>) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps, wd) = (
            self.beta1,
            self.beta2,
            self.learning_rate,
            self.eps,
            self.weight_decay,
        );
        let (first, second) = (&mut self.first, &mut self.second);
        let mut i = 0;
        model.visit_params(&mut |_, slot| {
            if first.len() <= i {
                first.push(vec![0.0; slot.value.len()]);
                second.push(vec![0.0; slot.value.len()]);
            }
            let (m, v) = (&mut first[i], &mut second[i]);
            for (((w, g), m), v) in slot
                .value
                .iter_mut()
                .zip(slot.grad.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g.to_f64_lossy();
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bias1) / ((*v / bias2).sqrt() + eps);
                let w64 = w.to_f64_lossy();
                *w = F::lit(w64 - lr * (update + wd * w64));
            }
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn first_step_moves_each_weight_by_the_learning_rate() {
        let mut m = Lcbm::<f64>::new(ModelConfig::tiny()).unwrap();
        let mut before = Vec::new();
        m.visit_params(&mut |_, s| {
            before.extend_from_slice(s.value);
            s.grad
                .iter_mut()
                .enumerate()
                .for_each(|(i, g)| *g = if i % 2 == 0 { 3.0 } else { -0.5 });
        });
        let mut opt = Adam::new(1e-2, 0.0);
        opt.step(&mut m);
        let mut k = 0;
        m.visit_params(&mut |_, s| {
            for (i, w) in s.value.iter().enumerate() {
                let expected = if i % 2 == 0 { -1e-2 } else { 1e-2 };
                assert!((w - before[k] - expected).abs() < 1e-8);
                k += 1;
            }
        });
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_weights() {
        let mut m = Lcbm::<f64>::new(ModelConfig::tiny()).unwrap();
        m.zero_grad();
        let mut before = 0.0;
        m.visit_params(&mut |_, s| before += s.value.iter().map(|w| w.abs()).sum::<f64>());
        Adam::new(0.1, 0.5).step(&mut m);
        let mut after = 0.0;
        m.visit_params(&mut |_, s| after += s.value.iter().map(|w| w.abs()).sum::<f64>());
        assert!((after - 0.95 * before).abs() < 1e-9 * before);
    }
}
