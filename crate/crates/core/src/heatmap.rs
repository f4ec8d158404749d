//! Attention overlays: each image area is tinted in proportion to its
//! min-max normalized attention on one caption token.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::align::AttentionMap;
use crate::corpus::RoiBox;
use crate::error::{Error, Result};

const TINT: [f64; 3] = [255.0, 0.0, 0.0];
const MAX_ALPHA: f64 = 0.7;

/// Per-area intensities in `[0, 1]`; a constant column maps to 0.5 everywhere.
pub fn area_intensities(att: &AttentionMap, token_index: usize) -> Result<Vec<f64>> {
    let n = att.token_level.cols();
    if token_index >= n {
        return Err(Error::InvalidArgument(format!("token index {token_index} out of range for {n} tokens")));
    }
    let col = att.token_level.column(token_index);
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(col.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 }).collect())
}

/// Overlay for `token_index`. Areas are the `grid × grid` patches of each ROI
/// in ROI order, matching the row layout of the attention map.
pub fn render_heatmap(att: &AttentionMap, image: &RgbImage, rois: &[RoiBox], grid: usize, token_index: usize) -> Result<RgbImage> {
    let intensities = area_intensities(att, token_index)?;
    let per_roi = grid * grid;
    if grid == 0 || intensities.len() != rois.len() * per_roi {
        return Err(Error::Shape(format!(
            "attention has {} areas but {} ROIs of {grid}x{grid} patches were given",
            intensities.len(),
            rois.len()
        )));
    }
    let mut out = image.clone();
    let p = grid as u32;
    for (r, roi) in rois.iter().enumerate() {
        roi.validate(image.width(), image.height())?;
        let (w, h) = (roi.width(), roi.height());
        for gy in 0..p {
            for gx in 0..p {
                let a = MAX_ALPHA * intensities[r * per_roi + (gy * p + gx) as usize];
                for y in roi.y0 + gy * h / p..roi.y0 + (gy + 1) * h / p {
                    for x in roi.x0 + gx * w / p..roi.x0 + (gx + 1) * w / p {
                        let src = image.get_pixel(x, y).0;
                        let px = std::array::from_fn(|c| ((1.0 - a) * src[c] as f64 + a * TINT[c]).round() as u8);
                        out.put_pixel(x, y, Rgb(px));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Renders and writes a PNG.
pub fn export_heatmap(
    att: &AttentionMap,
    image: &RgbImage,
    rois: &[RoiBox],
    grid: usize,
    token_index: usize,
    path: &Path,
) -> Result<()> {
    render_heatmap(att, image, rois, grid, token_index)?.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::attention_from_energies;
    use crate::params::sha256_hex;
    use crate::tensor::Matrix;

    fn gray() -> RgbImage {
        RgbImage::from_pixel(8, 8, Rgb([100, 100, 100]))
    }

    fn full() -> Vec<RoiBox> {
        vec![RoiBox::new(0, 0, 0, 8, 8)]
    }

    #[test]
    fn uniform_attention_gives_uniform_overlay() {
        let att = attention_from_energies(Matrix::zeros(4, 3), 1).unwrap();
        let out = render_heatmap(&att, &gray(), &full(), 2, 1).unwrap();
        let first = *out.get_pixel(0, 0);
        assert!(out.pixels().all(|p| *p == first));
        assert_ne!(first, Rgb([100, 100, 100]));
    }

    #[test]
    fn one_hot_area_is_the_only_tinted_patch() {
        let mut e = Matrix::zeros(4, 2);
        e[(3, 0)] = 50.0;
        let att = attention_from_energies(e, 1).unwrap();
        let out = render_heatmap(&att, &gray(), &full(), 2, 0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let in_area_3 = x >= 4 && y >= 4;
                let p = out.get_pixel(x, y).0;
                if in_area_3 {
                    assert_eq!(p, [209, 30, 30]);
                } else {
                    assert_eq!(p, [100, 100, 100]);
                }
            }
        }
    }

    #[test]
    fn bad_token_or_shape_is_rejected() {
        let att = attention_from_energies(Matrix::zeros(4, 2), 1).unwrap();
        assert!(render_heatmap(&att, &gray(), &full(), 2, 2).is_err());
        assert!(render_heatmap(&att, &gray(), &full(), 3, 0).is_err());
    }

    #[test]
    fn golden_pixels_and_stable_files() {
        let e = Matrix::from_vec(8, 2, (0..16).map(|i| ((i * 37) % 11) as f64 / 3.0).collect());
        let att = attention_from_energies(e, 2).unwrap();
        let img = RgbImage::from_fn(20, 10, |x, y| Rgb([(x * 12) as u8, (y * 25) as u8, 128]));
        let rois = vec![RoiBox::new(0, 0, 0, 10, 10), RoiBox::new(1, 10, 0, 20, 10)];
        let out = render_heatmap(&att, &img, &rois, 2, 1).unwrap();
        assert_eq!(sha256_hex(out.as_raw()), GOLDEN);

        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        export_heatmap(&att, &img, &rois, 2, 1, &a).unwrap();
        export_heatmap(&att, &img, &rois, 2, 1, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    const GOLDEN: &str = "396759f6d3902aab07cb7c0ed0db7da53b3cc5526dbf3f775234615e7fbe9e3e";
}
