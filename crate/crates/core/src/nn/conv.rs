//! 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Both layers share one geometry convention: a "large" grid of size `L` and
//! a "small" grid of size `S = (L + 2p - k) / s + 1`. A convolution maps
//! large to small, a transposed convolution maps small to large, and the two
//! are exact adjoints of each other.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis, Ix1, Ix4};
use rand::Rng;

use super::{Param, ParamVisitor, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent of a convolution over `n` positions.
    pub fn conv_out(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        (padded >= self.kernel && self.stride > 0).then(|| (padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution over `n` positions.
    pub fn transpose_out(&self, n: usize) -> Option<usize> {
        ((n - 1) * self.stride + self.kernel)
            .checked_sub(2 * self.padding)
            .filter(|&v| v > 0)
    }
}

/// Input row touched by output row `o` at kernel offset `kk`, if inside the image.
#[inline]
fn source_index(o: usize, kk: usize, geom: ConvGeometry, n: usize) -> Option<usize> {
    (o * geom.stride + kk)
        .checked_sub(geom.padding)
        .filter(|&i| i < n)
}

/// Output columns `[lo, hi)` whose input column at kernel offset `kk` lies inside `[0, n)`.
fn valid_range(kk: usize, geom: ConvGeometry, n: usize, n_out: usize) -> (usize, usize) {
    let lo = geom.padding.saturating_sub(kk).div_ceil(geom.stride);
    // largest o with o * stride + kk - padding <= n - 1
    let hi = match (n - 1 + geom.padding).checked_sub(kk) {
        Some(top) => (top / geom.stride + 1).min(n_out),
        None => 0,
    };
    (lo.min(hi), hi)
}

/// Unfolds patches of a `(B, C, H, W)` image into a `(C*k*k, B*Ho*Wo)` matrix.
pub fn im2col<F: Real>(
    image: &[F],
    dims: [usize; 4],
    geom: ConvGeometry,
    out_hw: (usize, usize),
) -> Array2<F> {
    let [b, c, h, w] = dims;
    let (ho, wo) = out_hw;
    let k = geom.kernel;
    let cols = b * ho * wo;
    let mut out = vec![F::zero(); c * k * k * cols];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                let (ox_lo, ox_hi) = valid_range(kx, geom, w, wo);
                for bi in 0..b {
                    let plane = &image[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let Some(iy) = source_index(oy, ky, geom, h) else {
                            continue;
                        };
                        let src = &plane[iy * w..(iy + 1) * w];
                        let dst = &mut dst_row[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                        let ix0 = ox_lo * geom.stride + kx - geom.padding;
                        if geom.stride == 1 {
                            dst[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + ox_hi - ox_lo]);
                        } else {
                            for (d, &v) in dst[ox_lo..ox_hi]
                                .iter_mut()
                                .zip(src[ix0..].iter().step_by(geom.stride))
                            {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, cols), out).expect("im2col shape")
}

/// Adjoint of [`im2col`]: folds a column matrix back, summing overlaps.
pub fn col2im<F: Real>(
    cols: ArrayView2<'_, F>,
    dims: [usize; 4],
    geom: ConvGeometry,
    out_hw: (usize, usize),
) -> Array4<F> {
    let [b, c, h, w] = dims;
    let (ho, wo) = out_hw;
    let k = geom.kernel;
    let cols = cols.as_standard_layout();
    let src_all = cols.as_slice().expect("standard layout");
    let ncols = b * ho * wo;
    let mut image = vec![F::zero(); b * c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &src_all[row * ncols..(row + 1) * ncols];
                let (ox_lo, ox_hi) = valid_range(kx, geom, w, wo);
                for bi in 0..b {
                    let plane = &mut image[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let Some(iy) = source_index(oy, ky, geom, h) else {
                            continue;
                        };
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        let src =
                            &src_row[(bi * ho + oy) * wo + ox_lo..(bi * ho + oy) * wo + ox_hi];
                        let ix0 = ox_lo * geom.stride + kx - geom.padding;
                        if geom.stride == 1 {
                            for (d, &v) in dst[ix0..ix0 + src.len()].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in dst[ix0..].iter_mut().step_by(geom.stride).zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((b, c, h, w), image).expect("col2im shape")
}

/// `(B, C, H, W)` -> `(C, B*H*W)`.
fn to_channel_major<F: Real>(x: ArrayView4<'_, F>) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    x.permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, b * h * w))
        .expect("contiguous")
}

/// `(C, B*H*W)` -> `(B, C, H, W)`.
fn from_channel_major<F: Real>(m: Array2<F>, b: usize, h: usize, w: usize) -> Array4<F> {
    let c = m.nrows();
    m.into_shape_with_order((c, b, h, w))
        .expect("contiguous")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

fn contiguous<F: Real>(x: ArrayView4<'_, F>) -> std::borrow::Cow<'_, [F]> {
    match x.to_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

/// Convolution with weight `(C_out, C_in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Real> {
    pub weight: Param<F, Ix4>,
    pub bias: Param<F, Ix1>,
    pub geom: ConvGeometry,
}

impl<F: Real> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        let k = geom.kernel;
        let bound = 1.0 / ((in_channels * k * k) as f64).sqrt();
        Self {
            weight: Param::uniform((out_channels, in_channels, k, k), bound, rng),
            bias: Param::uniform(out_channels, bound, rng),
            geom,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.geom.conv_out(h)?, self.geom.conv_out(w)?))
    }

    fn weight_matrix(&self) -> ArrayView2<'_, F> {
        let (o, i, k, _) = self.weight.value.dim();
        self.weight
            .value
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("standard layout")
    }

    /// Returns the output and the unfolded input needed by [`Conv2d::backward`].
    pub fn forward(&self, x: ArrayView4<'_, F>) -> (Array4<F>, Array2<F>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (ho, wo) = self.out_hw(h, w).expect("conv input smaller than kernel");
        let col = im2col(&contiguous(x), [b, c, h, w], self.geom, (ho, wo));
        let mut y = Array2::zeros((self.out_channels(), b * ho * wo));
        general_mat_mul(F::one(), &self.weight_matrix(), &col, F::zero(), &mut y);
        y += &self.bias.value.view().insert_axis(Axis(1));
        (from_channel_major(y, b, ho, wo), col)
    }

    /// Accumulates parameter gradients; returns `dL/dx` when `input_dims` is given.
    pub fn backward(
        &mut self,
        col: &Array2<F>,
        dy: ArrayView4<'_, F>,
        input_dims: Option<[usize; 4]>,
    ) -> Option<Array4<F>> {
        let (b, _, ho, wo) = dy.dim();
        let dy2 = to_channel_major(dy);
        let (o, i, k, _) = self.weight.value.dim();
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((o, i * k * k))
                .expect("standard layout");
            general_mat_mul(F::one(), &dy2, &col.t(), F::one(), &mut gw);
        }
        let db: Array1<F> = dy2.sum_axis(Axis(1));
        self.bias.grad += &db;
        let dims = input_dims?;
        debug_assert_eq!(dims[0], b);
        let mut dcol = Array2::zeros((i * k * k, b * ho * wo));
        general_mat_mul(
            F::one(),
            &self.weight_matrix().t(),
            &dy2,
            F::zero(),
            &mut dcol,
        );
        Some(col2im(dcol.view(), dims, self.geom, (ho, wo)))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        f(&format!("{prefix}.weight"), self.weight.slot());
        f(&format!("{prefix}.bias"), self.bias.slot());
    }
}

/// Transposed convolution with weight `(C_in, C_out, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F: Real> {
    pub weight: Param<F, Ix4>,
    pub bias: Param<F, Ix1>,
    pub geom: ConvGeometry,
}

impl<F: Real> ConvTranspose2d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        let k = geom.kernel;
        let bound = 1.0 / ((in_channels * k * k) as f64).sqrt();
        Self {
            weight: Param::uniform((in_channels, out_channels, k, k), bound, rng),
            bias: Param::uniform(out_channels, bound, rng),
            geom,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.geom.transpose_out(h)?, self.geom.transpose_out(w)?))
    }

    fn weight_matrix(&self) -> ArrayView2<'_, F> {
        let (i, o, k, _) = self.weight.value.dim();
        self.weight
            .value
            .view()
            .into_shape_with_order((i, o * k * k))
            .expect("standard layout")
    }

    pub fn forward(&self, x: ArrayView4<'_, F>) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "transposed conv input channels");
        let (ho, wo) = self.out_hw(h, w).expect("degenerate transposed conv");
        let x2 = to_channel_major(x);
        let (_, o, k, _) = self.weight.value.dim();
        let mut cols = Array2::zeros((o * k * k, b * h * w));
        general_mat_mul(
            F::one(),
            &self.weight_matrix().t(),
            &x2,
            F::zero(),
            &mut cols,
        );
        let mut y = col2im(cols.view(), [b, o, ho, wo], self.geom, (h, w));
        y += &self
            .bias
            .value
            .view()
            .insert_axis(Axis(1))
            .insert_axis(Axis(2));
        y
    }

    /// Accumulates parameter gradients; returns `dL/dx` when `need_input_grad`.
    pub fn backward(
        &mut self,
        x: ArrayView4<'_, F>,
        dy: ArrayView4<'_, F>,
        need_input_grad: bool,
    ) -> Option<Array4<F>> {
        let (b, c, h, w) = x.dim();
        let (_, o, ho, wo) = dy.dim();
        let k = self.geom.kernel;
        let dcol = im2col(&contiguous(dy), [b, o, ho, wo], self.geom, (h, w));
        let x2 = to_channel_major(x);
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((c, o * k * k))
                .expect("standard layout");
            general_mat_mul(F::one(), &x2, &dcol.t(), F::one(), &mut gw);
        }
        let db: Array1<F> = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        self.bias.grad += &db;
        if !need_input_grad {
            return None;
        }
        let mut dx2 = Array2::zeros((c, b * h * w));
        general_mat_mul(F::one(), &self.weight_matrix(), &dcol, F::zero(), &mut dx2);
        Some(from_channel_major(dx2, b, h, w))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        f(&format!("{prefix}.weight"), self.weight.slot());
        f(&format!("{prefix}.bias"), self.bias.slot());
    }
}
