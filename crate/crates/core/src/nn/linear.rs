use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{Param, ParamVisitor, Real};

/// Affine map `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear<F: Real> {
    pub weight: Param<F, Ix2>,
    pub bias: Param<F, Ix1>,
}

impl<F: Real> Linear<F> {
    /// Uniform `±1/sqrt(fan_in)` initialization for both weight and bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Param::uniform((input, output), bound, rng),
            bias: Param::uniform(output, bound, rng),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        let mut y = Array2::zeros((x.nrows(), self.out_features()));
        general_mat_mul(F::one(), &x, &self.weight.value, F::zero(), &mut y);
        y += &self.bias.value;
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: ArrayView2<'_, F>, dy: ArrayView2<'_, F>) -> Array2<F> {
        self.accumulate_grads(x, dy);
        let mut dx = Array2::zeros((dy.nrows(), self.in_features()));
        general_mat_mul(F::one(), &dy, &self.weight.value.t(), F::zero(), &mut dx);
        dx
    }

    /// Parameter gradients only, for layers fed by constant inputs.
    pub fn accumulate_grads(&mut self, x: ArrayView2<'_, F>, dy: ArrayView2<'_, F>) {
        general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut self.weight.grad);
        let db: Array1<F> = dy.sum_axis(Axis(0));
        self.bias.grad += &db;
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        f(&format!("{prefix}.weight"), self.weight.slot());
        f(&format!("{prefix}.bias"), self.bias.slot());
    }
}
