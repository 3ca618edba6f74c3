use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;

use crate::nn::{silu, silu_backward, Linear, ParamVisitor, Real};

/// Independent two-layer MLP per concept, hidden width equal to the
/// embedding width: `c_j = W2_j silu(W1_j e + b1_j) + b2_j`.
#[derive(Debug, Clone)]
pub struct ConceptHeads<F: Real> {
    first: Vec<Linear<F>>,
    second: Vec<Linear<F>>,
}

pub(crate) struct HeadsCache<F: Real> {
    pre: Vec<Array2<F>>,
    hidden: Vec<Array2<F>>,
}

impl<F: Real> ConceptHeads<F> {
    pub fn new<R: Rng + ?Sized>(
        n_concepts: usize,
        feature_dim: usize,
        embedding_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut first = Vec::with_capacity(n_concepts);
        let mut second = Vec::with_capacity(n_concepts);
        for _ in 0..n_concepts {
            first.push(Linear::new(feature_dim, embedding_dim, rng));
            second.push(Linear::new(embedding_dim, embedding_dim, rng));
        }
        Self { first, second }
    }

    /// Embeddings shaped `(B, k, d)`.
    pub(crate) fn forward(&self, feats: ArrayView2<'_, F>) -> (Array3<F>, HeadsCache<F>) {
        let k = self.first.len();
        let d = self.second[0].out_features();
        let mut emb = Array3::zeros((feats.nrows(), k, d));
        let mut pre = Vec::with_capacity(k);
        let mut hidden = Vec::with_capacity(k);
        for (j, (l1, l2)) in self.first.iter().zip(&self.second).enumerate() {
            let p = l1.forward(feats);
            let h = silu(p.view());
            emb.slice_mut(s![.., j, ..]).assign(&l2.forward(h.view()));
            pre.push(p);
            hidden.push(h);
        }
        (emb, HeadsCache { pre, hidden })
    }

    /// Returns `dL/dfeats`.
    pub(crate) fn backward(
        &mut self,
        cache: &HeadsCache<F>,
        feats: ArrayView2<'_, F>,
        demb: ArrayView3<'_, F>,
    ) -> Array2<F> {
        let mut dfeats = Array2::zeros(feats.raw_dim());
        for j in 0..self.first.len() {
            let dc = demb.slice(s![.., j, ..]);
            let dh = self.second[j].backward(cache.hidden[j].view(), dc);
            let dp = silu_backward(cache.pre[j].view(), dh.view());
            dfeats += &self.first[j].backward(feats, dp.view());
        }
        dfeats
    }

    pub(crate) fn visit(&mut self, f: &mut ParamVisitor<'_, F>) {
        for (j, (l1, l2)) in self
            .first
            .iter_mut()
            .zip(self.second.iter_mut())
            .enumerate()
        {
            l1.visit(&format!("heads.{j}.fc1"), f);
            l2.visit(&format!("heads.{j}.fc2"), f);
        }
    }
}
