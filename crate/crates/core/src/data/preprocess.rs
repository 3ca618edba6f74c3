//! Resizing and optional augmentation of batches.

use ndarray::{s, Array2, Array4, ArrayView2};
use rand::Rng;

use super::{DatasetKind, LabeledBatch};

/// Bilinear resize of one plane with half-pixel centers.
pub fn resize_bilinear(src: ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let coords = |o: usize, scale: f32, n: usize| {
        let c = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f32);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, c - lo as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|x| coords(x, sx, w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coords(y, sy, h);
        let (x0, x1, fx) = xs[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn flip_horizontal(src: ArrayView2<'_, f32>) -> Array2<f32> {
    src.slice(s![.., ..;-1]).to_owned()
}

/// Rotation about the center by `degrees`, bilinear, zero fill.
pub fn rotate(src: ArrayView2<'_, f32>, degrees: f32) -> Array2<f32> {
    let (h, w) = src.dim();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let sample = |y: f32, x: f32| -> f32 {
        if y < 0.0 || x < 0.0 || y > (h - 1) as f32 || x > (w - 1) as f32 {
            return 0.0;
        }
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f32, x - x0 as f32);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (dy, dx) = (y as f32 - cy, x as f32 - cx);
        // inverse map: rotate the output coordinate back into the source
        sample(cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
    })
}

/// Crop covering `[scale_lo, 1]` of the area, resized back to the input size.
pub fn random_resized_crop<R: Rng + ?Sized>(
    src: ArrayView2<'_, f32>,
    scale_lo: f32,
    rng: &mut R,
) -> Array2<f32> {
    let (h, w) = src.dim();
    let side = rng.random_range(scale_lo..=1.0f32).sqrt();
    let ch = ((h as f32 * side).round() as usize).clamp(1, h);
    let cw = ((w as f32 * side).round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    resize_bilinear(src.slice(s![y0..y0 + ch, x0..x0 + cw]), h, w)
}

/// Flip with probability 1/2, crop covering at least 80% of the area,
/// rotate by up to 10 degrees. The same draw applies to every channel.
pub fn augment_image<R: Rng + ?Sized>(image: &mut Array4<f32>, b: usize, rng: &mut R) {
    let flip = rng.random_bool(0.5);
    let angle = rng.random_range(-10.0f32..=10.0);
    let crop_seed: u64 = rng.random();
    let channels = image.dim().1;
    for c in 0..channels {
        let mut plane = image.slice(s![b, c, .., ..]).to_owned();
        if flip {
            plane = flip_horizontal(plane.view());
        }
        let mut crop_rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(crop_seed);
        plane = random_resized_crop(plane.view(), 0.8, &mut crop_rng);
        plane = rotate(plane.view(), angle);
        image.slice_mut(s![b, c, .., ..]).assign(&plane);
    }
}

/// Resizes every image to `target_hw` and keeps values in `[0, 1]`.
///
/// `augment` is ignored, with a warning, for datasets whose labels depend on
/// orientation (every MNIST variant).
pub fn preprocess<R: Rng + ?Sized>(
    batch: &LabeledBatch,
    kind: DatasetKind,
    target_hw: (usize, usize),
    augment: bool,
    rng: &mut R,
) -> LabeledBatch {
    let (n, c, h, w) = batch.images.dim();
    let (th, tw) = target_hw;
    let mut images = if (h, w) == (th, tw) {
        batch.images.clone()
    } else {
        let mut out = Array4::zeros((n, c, th, tw));
        for b in 0..n {
            for ch in 0..c {
                let plane = resize_bilinear(batch.images.slice(s![b, ch, .., ..]), th, tw);
                out.slice_mut(s![b, ch, .., ..]).assign(&plane);
            }
        }
        out
    };
    if augment {
        if kind.allows_augmentation() {
            for b in 0..n {
                augment_image(&mut images, b, rng);
            }
        } else {
            log::warn!("augmentation requested for {} and skipped", kind.name());
        }
    }
    images.mapv_inplace(|v| v.clamp(0.0, 1.0));
    LabeledBatch {
        images,
        labels: batch.labels.clone(),
        concepts: batch.concepts.clone(),
        indices: batch.indices.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(h: usize, w: usize) -> LabeledBatch {
        LabeledBatch {
            images: Array4::from_shape_fn((2, 3, h, w), |(b, c, y, x)| {
                ((b + c + y * w + x) % 11) as f32 / 10.0
            }),
            labels: vec![0, 1],
            concepts: None,
            indices: vec![4, 5],
        }
    }

    #[test]
    fn identity_at_native_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batch(28, 28);
        let out = preprocess(&b, DatasetKind::MnistEvenOdd, (28, 28), false, &mut rng);
        assert_eq!(out, b);
    }

    #[test]
    fn upscales_to_requested_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = preprocess(
            &batch(28, 28),
            DatasetKind::MnistEvenOdd,
            (224, 224),
            false,
            &mut rng,
        );
        assert_eq!(out.images.dim(), (2, 3, 224, 224));
        assert!(out.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn mnist_is_never_augmented() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batch(28, 56);
        let out = preprocess(&b, DatasetKind::MnistAddition, (28, 56), true, &mut rng);
        assert_eq!(out, b);
    }

    #[test]
    fn bilinear_preserves_constants_and_averages() {
        let c = Array2::from_elem((5, 7), 0.25f32);
        assert!(resize_bilinear(c.view(), 9, 3)
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-6));
        let src = array![[0.0f32, 1.0], [1.0, 0.0]];
        let down = resize_bilinear(src.view(), 1, 1);
        assert!((down[[0, 0]] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn geometric_ops() {
        let src = array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        assert_eq!(
            flip_horizontal(src.view()),
            array![[3.0, 2.0, 1.0], [6.0, 5.0, 4.0], [9.0, 8.0, 7.0]]
        );
        assert_eq!(rotate(src.view(), 0.0), src);
        let quarter = rotate(src.view(), 90.0);
        assert!((quarter[[1, 1]] - 5.0).abs() < 1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_resized_crop(src.view(), 1.0, &mut rng), src);
    }

    #[test]
    fn augmentation_stays_in_range_and_is_seeded() {
        let mut a = batch(12, 12).images;
        let mut b = a.clone();
        augment_image(&mut a, 0, &mut ChaCha8Rng::seed_from_u64(3));
        augment_image(&mut b, 0, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
