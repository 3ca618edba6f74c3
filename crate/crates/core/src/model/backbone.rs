use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use rand::Rng;

use crate::config::ModelConfig;
use crate::nn::{silu, silu_backward, Conv2d, ConvGeometry, Linear, ParamVisitor, Real};

/// Frozen feature extractor plugged in for `BackboneMode::FrozenExternal`.
///
/// Implementations receive preprocessed `(B, C, H, W)` images and return
/// `(B, feature_dim)` features. No gradient flows into them.
pub trait FeatureExtractor<F: Real>: Send + Sync {
    fn feature_dim(&self) -> usize;
    fn extract(&self, images: ArrayView4<'_, F>) -> Array2<F>;
}

// one backbone per model, so the size gap between variants is irrelevant
#[allow(clippy::large_enum_variant)]
#[derive(Clone)]
pub enum Backbone<F: Real> {
    SmallCnn(SmallCnn<F>),
    External(Arc<dyn FeatureExtractor<F>>),
}

impl<F: Real> fmt::Debug for Backbone<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backbone::SmallCnn(net) => f.debug_tuple("SmallCnn").field(net).finish(),
            Backbone::External(ext) => write!(f, "External(feature_dim = {})", ext.feature_dim()),
        }
    }
}

pub(crate) enum BackboneCache<F: Real> {
    SmallCnn(SmallCnnCache<F>),
    External,
}

impl<F: Real> Backbone<F> {
    pub(crate) fn forward(&self, x: ArrayView4<'_, F>) -> (Array2<F>, BackboneCache<F>) {
        match self {
            Backbone::SmallCnn(net) => {
                let (y, cache) = net.forward(x);
                (y, BackboneCache::SmallCnn(cache))
            }
            Backbone::External(ext) => (ext.extract(x), BackboneCache::External),
        }
    }

    pub(crate) fn backward(&mut self, cache: &BackboneCache<F>, dfeats: ArrayView2<'_, F>) {
        if let (Backbone::SmallCnn(net), BackboneCache::SmallCnn(c)) = (self, cache) {
            net.backward(c, dfeats);
        }
    }

    pub(crate) fn visit(&mut self, f: &mut ParamVisitor<'_, F>) {
        if let Backbone::SmallCnn(net) = self {
            net.visit(f);
        }
    }
}

/// Four conv blocks (three stride-2, one stride-1), each followed by SiLU,
/// then a linear projection to the feature width.
#[derive(Debug, Clone)]
pub struct SmallCnn<F: Real> {
    convs: Vec<Conv2d<F>>,
    proj: Linear<F>,
}

pub(crate) struct SmallCnnCache<F: Real> {
    cols: Vec<Array2<F>>,
    in_dims: Vec<[usize; 4]>,
    pre: Vec<Array4<F>>,
    flat: Array2<F>,
    proj_pre: Array2<F>,
}

const STRIDES: [usize; 4] = [2, 2, 2, 1];

impl<F: Real> SmallCnn<F> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let [c, mut h, mut w] = config.image_shape;
        let mut in_ch = c;
        let mut convs = Vec::with_capacity(4);
        for (&out_ch, &stride) in config.arch.backbone_channels.iter().zip(&STRIDES) {
            let conv = Conv2d::new(in_ch, out_ch, ConvGeometry::new(3, stride, 1), rng);
            (h, w) = conv.out_hw(h, w).expect("validated image shape");
            convs.push(conv);
            in_ch = out_ch;
        }
        let proj = Linear::new(in_ch * h * w, config.arch.feature_dim, rng);
        Self { convs, proj }
    }

    fn forward(&self, x: ArrayView4<'_, F>) -> (Array2<F>, SmallCnnCache<F>) {
        let mut cols = Vec::with_capacity(4);
        let mut in_dims = Vec::with_capacity(4);
        let mut pre = Vec::with_capacity(4);
        let mut act: Option<Array4<F>> = None;
        for conv in &self.convs {
            let input = act.as_ref().map_or(x.view(), |a| a.view());
            let d = input.dim();
            in_dims.push([d.0, d.1, d.2, d.3]);
            let (y, col) = conv.forward(input);
            act = Some(silu(y.view()));
            cols.push(col);
            pre.push(y);
        }
        let act = act.expect("four conv blocks");
        let b = act.dim().0;
        let flat = act
            .into_shape_with_order((b, self.proj.in_features()))
            .expect("standard layout");
        let proj_pre = self.proj.forward(flat.view());
        let feats = silu(proj_pre.view());
        let cache = SmallCnnCache {
            cols,
            in_dims,
            pre,
            flat,
            proj_pre,
        };
        (feats, cache)
    }

    fn backward(&mut self, cache: &SmallCnnCache<F>, dfeats: ArrayView2<'_, F>) {
        let dpre = silu_backward(cache.proj_pre.view(), dfeats);
        let dflat = self.proj.backward(cache.flat.view(), dpre.view());
        let last = cache.pre.last().expect("four conv blocks").raw_dim();
        let mut dact = dflat.into_shape_with_order(last).expect("standard layout");
        for i in (0..self.convs.len()).rev() {
            let dy = silu_backward(cache.pre[i].view(), dact.view());
            let need_input = (i > 0).then_some(cache.in_dims[i]);
            match self.convs[i].backward(&cache.cols[i], dy.view(), need_input) {
                Some(dx) => dact = dx,
                None => break,
            }
        }
    }

    fn visit(&mut self, f: &mut ParamVisitor<'_, F>) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit(&format!("backbone.conv{i}"), f);
        }
        self.proj.visit("backbone.proj", f);
    }
}
