use ndarray::{Array2, Array3, ArrayView3};
use rand::Rng;

use crate::nn::{silu, silu_backward, Linear, ParamVisitor, Real};

/// Shared network mapping one concept embedding to one weight per class.
///
/// Applied independently to every `(sample, concept)` row, so column `j` of
/// a sample's weight matrix depends only on that sample's embedding `c_j`.
#[derive(Debug, Clone)]
pub struct WeightPredictor<F: Real> {
    hidden: Linear<F>,
    out: Linear<F>,
}

pub(crate) struct WeightCache<F: Real> {
    rows: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

impl<F: Real> WeightPredictor<F> {
    pub fn new<R: Rng + ?Sized>(
        embedding_dim: usize,
        hidden: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(embedding_dim, hidden, rng),
            out: Linear::new(hidden, n_classes, rng),
        }
    }

    /// Weights shaped `(B, n_classes, k)`.
    pub(crate) fn forward(&self, emb: ArrayView3<'_, F>) -> (Array3<F>, WeightCache<F>) {
        let (b, k, d) = emb.dim();
        let rows = emb
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * k, d))
            .expect("standard layout");
        let pre = self.hidden.forward(rows.view());
        let act = silu(pre.view());
        let flat = self.out.forward(act.view());
        let n = flat.ncols();
        // rows are (b, j) major; move the class axis forward.
        let weights = flat
            .into_shape_with_order((b, k, n))
            .expect("standard layout")
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .into_owned();
        (weights, WeightCache { rows, pre, act })
    }

    /// Takes `dL/dweights` shaped `(B, n_classes, k)`; returns `dL/demb`.
    pub(crate) fn backward(
        &mut self,
        cache: &WeightCache<F>,
        dweights: ArrayView3<'_, F>,
    ) -> Array3<F> {
        let (b, n, k) = dweights.dim();
        let dflat = dweights
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * k, n))
            .expect("standard layout");
        let dact = self.out.backward(cache.act.view(), dflat.view());
        let dpre = silu_backward(cache.pre.view(), dact.view());
        let drows: Array2<F> = self.hidden.backward(cache.rows.view(), dpre.view());
        let d = drows.ncols();
        drows
            .into_shape_with_order((b, k, d))
            .expect("standard layout")
    }

    pub(crate) fn visit(&mut self, f: &mut ParamVisitor<'_, F>) {
        self.hidden.visit("classifier.fc1", f);
        self.out.visit("classifier.fc2", f);
    }
}
