use ndarray::{Array, ArrayView, Dimension, Zip};

use super::Real;

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    // Split on sign so exp never overflows.
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `x * sigmoid(x)`, elementwise.
pub fn silu<F: Real, D: Dimension>(x: ArrayView<'_, F, D>) -> Array<F, D> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient of [`silu`] given the pre-activation and the upstream gradient.
pub fn silu_backward<F: Real, D: Dimension>(
    pre: ArrayView<'_, F, D>,
    upstream: ArrayView<'_, F, D>,
) -> Array<F, D> {
    let mut out = Array::zeros(pre.raw_dim());
    Zip::from(&mut out)
        .and(&pre)
        .and(&upstream)
        .for_each(|o, &x, &g| {
            let s = sigmoid(x);
            *o = g * s * (F::one() + x * (F::one() - s));
        });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(10.0f64) - 0.999_954_602_131_297_6).abs() < 1e-15);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
        assert!(sigmoid(-800.0f32).is_finite());
    }

    #[test]
    fn silu_gradient_matches_central_difference() {
        let xs = arr1(&[-3.0f64, -0.5, 0.0, 0.7, 4.0]);
        let ones = arr1(&[1.0f64; 5]);
        let analytic = silu_backward(xs.view(), ones.view());
        let h = 1e-6;
        for (i, &x) in xs.iter().enumerate() {
            let f = |v: f64| v * sigmoid(v);
            let numeric = (f(x + h) - f(x - h)) / (2.0 * h);
            assert!((analytic[i] - numeric).abs() < 1e-8);
        }
    }
}
