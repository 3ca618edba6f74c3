//! PNG output: dictionary contact sheets and importance bar plots.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use ndarray::ArrayView3;

use super::Explanation;
use crate::error::{Error, Result};

const GAP: u32 = 2;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `(C, H, W)` in `[0, 1]` to RGB, each pixel repeated `scale` times per axis.
/// One-channel input is shown as gray.
pub fn to_rgb(image: ArrayView3<'_, f32>, scale: u32) -> RgbImage {
    let (c, h, w) = image.dim();
    let scale = scale.max(1);
    RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let (yy, xx) = ((y / scale) as usize, (x / scale) as usize);
        let ch = |i: usize| to_byte(image[[i.min(c - 1), yy, xx]]);
        Rgb([ch(0), ch(1), ch(2)])
    })
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    image
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::data(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Images laid out left to right with a white gap.
pub fn contact_sheet(images: &[ArrayView3<'_, f32>], scale: u32) -> RgbImage {
    let tiles: Vec<RgbImage> = images.iter().map(|im| to_rgb(im.view(), scale)).collect();
    let height = tiles.iter().map(|t| t.height()).max().unwrap_or(1);
    let width = tiles
        .iter()
        .map(|t| t.width() + GAP)
        .sum::<u32>()
        .saturating_sub(GAP)
        .max(1);
    let mut sheet = RgbImage::from_pixel(width, height, BACKGROUND);
    let mut x0 = 0;
    for t in &tiles {
        image::imageops::replace(&mut sheet, t, i64::from(x0), 0);
        x0 += t.width() + GAP;
    }
    sheet
}

/// Horizontal bars, one row per concept: importance to the right of the
/// center line in green when positive, to the left in red when negative.
/// Inactive concepts get an empty row with a gray tick.
pub fn importance_bars(explanation: &Explanation) -> RgbImage {
    const ROW: u32 = 14;
    const HALF: u32 = 120;
    const BAR: u32 = 10;
    let k = explanation.concepts.len() as u32;
    let mut img = RgbImage::from_pixel(2 * HALF + 1, (k * ROW).max(1), BACKGROUND);
    let max = explanation
        .concepts
        .iter()
        .map(|c| c.importance.abs())
        .fold(0.0f32, f32::max);
    for (row, c) in explanation.concepts.iter().enumerate() {
        let y0 = row as u32 * ROW + (ROW - BAR) / 2;
        let len = if max > 0.0 {
            ((c.importance.abs() / max) * HALF as f32).round() as u32
        } else {
            0
        };
        let (x_from, x_to, color) = if c.importance >= 0.0 {
            (HALF + 1, HALF + 1 + len, Rgb([46, 139, 87]))
        } else {
            (HALF - len, HALF, Rgb([200, 50, 50]))
        };
        for y in y0..y0 + BAR {
            for x in x_from..x_to.min(2 * HALF + 1) {
                img.put_pixel(x, y, color);
            }
        }
        if c.score == 0.0 {
            img.put_pixel(HALF, y0 + BAR / 2, Rgb([160, 160, 160]));
        }
    }
    for y in 0..img.height() {
        img.put_pixel(HALF, y, Rgb([0, 0, 0]));
    }
    img
}

#[cfg(test)]
mod tests {
    use super::super::{ConceptContribution, SampleRef};
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rgb_conversion_scales_and_replicates_gray() {
        let im = Array3::from_shape_fn((1, 2, 3), |(_, y, x)| (y * 3 + x) as f32 / 5.0);
        let rgb = to_rgb(im.view(), 2);
        assert_eq!(rgb.dimensions(), (6, 4));
        assert_eq!(rgb.get_pixel(5, 3), &Rgb([255, 255, 255]));
        assert_eq!(rgb.get_pixel(0, 0), &Rgb([0, 0, 0]));
    }

    #[test]
    fn contact_sheet_width() {
        let im = Array3::<f32>::zeros((3, 4, 5));
        let views = vec![im.view(); 7];
        let sheet = contact_sheet(&views, 1);
        assert_eq!(sheet.dimensions(), (7 * 5 + 6 * GAP, 4));
        let png = encode_png(&sheet).unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }

    #[test]
    fn bars_have_one_row_per_concept() {
        let concepts = (0..4)
            .map(|j| ConceptContribution {
                concept: j,
                score: (j % 2) as f32,
                probability: 0.5,
                weight: j as f32 - 1.5,
                importance: (j % 2) as f32 * (j as f32 - 1.5),
            })
            .collect();
        let e = Explanation {
            sample: SampleRef {
                split: "test".into(),
                index: 0,
            },
            label: None,
            predicted_class: 0,
            predicted_score: 0.0,
            class_scores: vec![0.0],
            concepts,
            reconstruction: None,
        };
        let img = importance_bars(&e);
        assert_eq!(img.height(), 4 * 14);
        // concept 3 has positive importance, concept 1 negative
        assert_eq!(img.get_pixel(130, 3 * 14 + 7), &Rgb([46, 139, 87]));
        assert_eq!(img.get_pixel(110, 14 + 7), &Rgb([200, 50, 50]));
    }
}
