use ndarray::{Array2, Array4, ArrayView4};
use rand::Rng;

use crate::config::ModelConfig;
use crate::nn::{
    sigmoid, silu, silu_backward, ConvGeometry, ConvTranspose2d, Linear, ParamVisitor, Real,
};

/// Linear seed grid at a quarter of the image resolution followed by five
/// transposed convolutions: two of them stride 2, the rest resolution
/// preserving. The last layer is squashed with a sigmoid into `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Decoder<F: Real> {
    seed: Linear<F>,
    seed_shape: [usize; 3],
    layers: Vec<ConvTranspose2d<F>>,
}

pub(crate) struct DecoderCache<F: Real> {
    input: Array2<F>,
    seed_pre: Array2<F>,
    layer_inputs: Vec<Array4<F>>,
    layer_pre: Vec<Array4<F>>,
    output: Array4<F>,
}

const GEOMETRIES: [ConvGeometry; 5] = [
    ConvGeometry::new(3, 1, 1),
    ConvGeometry::new(4, 2, 1),
    ConvGeometry::new(4, 2, 1),
    ConvGeometry::new(3, 1, 1),
    ConvGeometry::new(3, 1, 1),
];

impl<F: Real> Decoder<F> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let [img_c, h, w] = config.image_shape;
        let ch = config.arch.decoder_channels;
        let seed_shape = [ch[0], h / 4, w / 4];
        let seed = Linear::new(config.decoder_input_dim(), seed_shape.iter().product(), rng);
        let outs = [ch[1], ch[2], ch[3], ch[4], img_c];
        let mut in_ch = ch[0];
        let mut layers = Vec::with_capacity(5);
        for (geom, out_ch) in GEOMETRIES.into_iter().zip(outs) {
            layers.push(ConvTranspose2d::new(in_ch, out_ch, geom, rng));
            in_ch = out_ch;
        }
        Self {
            seed,
            seed_shape,
            layers,
        }
    }

    /// Spatial extent produced for the configured seed grid.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        let (mut h, mut w) = (self.seed_shape[1], self.seed_shape[2]);
        for layer in &self.layers {
            (h, w) = layer.out_hw(h, w)?;
        }
        Some((h, w))
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels())
    }

    /// `input` is the masked, concept-major flattened embedding `(B, k*d)`.
    pub(crate) fn forward(&self, input: Array2<F>) -> (Array4<F>, DecoderCache<F>) {
        let b = input.nrows();
        let seed_pre = self.seed.forward(input.view());
        let [c0, h0, w0] = self.seed_shape;
        let mut x = silu(seed_pre.view())
            .into_shape_with_order((b, c0, h0, w0))
            .expect("standard layout");
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut layer_pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(x.view());
            let next = if i == last {
                y.mapv(sigmoid)
            } else {
                silu(y.view())
            };
            layer_inputs.push(x);
            layer_pre.push(y);
            x = next;
        }
        let cache = DecoderCache {
            input,
            seed_pre,
            layer_inputs,
            layer_pre,
            output: x.clone(),
        };
        (x, cache)
    }

    /// Returns `dL/dinput` for the flattened masked embeddings.
    pub(crate) fn backward(
        &mut self,
        cache: &DecoderCache<F>,
        dout: ArrayView4<'_, F>,
    ) -> Array2<F> {
        let mut dy = dout.to_owned();
        dy.zip_mut_with(&cache.output, |g, &s| *g *= s * (F::one() - s));
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i != last {
                dy = silu_backward(cache.layer_pre[i].view(), dy.view());
            }
            dy = self.layers[i]
                .backward(cache.layer_inputs[i].view(), dy.view(), true)
                .expect("input gradient requested");
        }
        let b = dy.dim().0;
        let dflat = dy
            .into_shape_with_order((b, self.seed.out_features()))
            .expect("standard layout");
        let dpre = silu_backward(cache.seed_pre.view(), dflat.view());
        self.seed.backward(cache.input.view(), dpre.view())
    }

    pub(crate) fn visit(&mut self, f: &mut ParamVisitor<'_, F>) {
        self.seed.visit("decoder.seed", f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit(&format!("decoder.deconv{i}"), f);
        }
    }
}
