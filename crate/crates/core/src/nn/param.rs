use ndarray::{Array, Dimension};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Real;

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F: Real, D: Dimension> {
    pub value: Array<F, D>,
    pub grad: Array<F, D>,
}

impl<F: Real, D: Dimension> Param<F, D> {
    pub fn new(value: Array<F, D>) -> Self {
        let value = value.as_standard_layout().into_owned();
        let grad = Array::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros<Sh: ndarray::ShapeBuilder<Dim = D>>(shape: Sh) -> Self {
        Self::new(Array::zeros(shape))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<Sh, R>(shape: Sh, bound: f64, rng: &mut R) -> Self
    where
        Sh: ndarray::ShapeBuilder<Dim = D>,
        R: Rng + ?Sized,
    {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut value = Array::zeros(shape);
        value.iter_mut().for_each(|v| *v = F::lit(dist.sample(rng)));
        Self::new(value)
    }

    pub fn normal<Sh, R>(shape: Sh, std: f64, rng: &mut R) -> Self
    where
        Sh: ndarray::ShapeBuilder<Dim = D>,
        R: Rng + ?Sized,
    {
        let dist = Normal::new(0.0, std).expect("positive std");
        let mut value = Array::zeros(shape);
        value.iter_mut().for_each(|v| *v = F::lit(dist.sample(rng)));
        Self::new(value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn slot(&mut self) -> ParamSlot<'_, F> {
        ParamSlot {
            shape: self.value.shape().to_vec(),
            value: self.value.as_slice_mut().expect("standard layout"),
            grad: self.grad.as_slice_mut().expect("standard layout"),
        }
    }
}

/// Flat mutable view of one parameter, handed to optimizers and serializers.
pub struct ParamSlot<'a, F> {
    pub shape: Vec<usize>,
    pub value: &'a mut [F],
    pub grad: &'a mut [F],
}

/// Callback over every named parameter in a fixed, stable order.
pub type ParamVisitor<'v, F> = dyn FnMut(&str, ParamSlot<'_, F>) + 'v;
