//! Sub-image detection by recursive cuts along uniform separator bands.
//!
//! A row (or column) is uniform when its per-channel standard deviation over
//! the current region stays below `std_fraction` of the 0–255 range. A
//! separator is a maximal run of uniform lines sharing one colour that is at
//! least `min_thickness` thick, no thicker than `max_fraction` of the region,
//! and does not touch the region border. Solid panels therefore never count
//! as separators: they are too thick or sit on the border.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::corpus::{check_non_overlapping, RoiBox};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub std_fraction: f64,
    pub min_thickness: u32,
    pub max_fraction: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig { std_fraction: 0.02, min_thickness: 3, max_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    Auto,
    Manual,
}

/// Panels plus the separator rectangles that were cut away.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub rois: Vec<RoiBox>,
    pub separators: Vec<RoiBox>,
}

#[derive(Clone, Copy)]
struct Region {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

/// Mean colour and uniformity of one line of the region.
fn line_stats(img: &RgbImage, pixels: impl Iterator<Item = (u32, u32)>) -> ([f64; 3], f64) {
    let mut n = 0f64;
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    for (x, y) in pixels {
        let p = img.get_pixel(x, y).0;
        n += 1.0;
        for c in 0..3 {
            let v = p[c] as f64;
            sum[c] += v;
            sq[c] += v * v;
        }
    }
    let mut mean = [0f64; 3];
    let mut worst = 0f64;
    for c in 0..3 {
        mean[c] = sum[c] / n;
        let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
        worst = worst.max(var.sqrt());
    }
    (mean, worst)
}

/// Separator runs `[start, end)` along one axis of `region`.
fn find_separators(img: &RgbImage, region: Region, horizontal: bool, cfg: &SegmentConfig) -> Vec<(u32, u32)> {
    let limit = cfg.std_fraction * 255.0;
    let (lo, hi) = if horizontal { (region.y0, region.y1) } else { (region.x0, region.x1) };
    let extent = hi - lo;
    let lines: Vec<Option<[f64; 3]>> = (lo..hi)
        .map(|k| {
            let (mean, std) = if horizontal {
                line_stats(img, (region.x0..region.x1).map(|x| (x, k)))
            } else {
                line_stats(img, (region.y0..region.y1).map(|y| (k, y)))
            };
            (std < limit).then_some(mean)
        })
        .collect();

    let mut runs = Vec::new();
    let mut k = 0usize;
    while k < lines.len() {
        let Some(colour) = lines[k] else {
            k += 1;
            continue;
        };
        let start = k;
        while k < lines.len() && lines[k].is_some_and(|m| (0..3).all(|c| (m[c] - colour[c]).abs() < limit)) {
            k += 1;
        }
        let thickness = (k - start) as u32;
        let interior = start > 0 && k < lines.len();
        if interior && thickness >= cfg.min_thickness && thickness as f64 <= cfg.max_fraction * extent as f64 {
            runs.push((lo + start as u32, lo + k as u32));
        }
    }
    runs
}

fn cut(img: &RgbImage, region: Region, cfg: &SegmentConfig, out: &mut Segmentation) -> Result<()> {
    for horizontal in [true, false] {
        let seps = find_separators(img, region, horizontal, cfg);
        if seps.is_empty() {
            continue;
        }
        let (lo, hi) = if horizontal { (region.y0, region.y1) } else { (region.x0, region.x1) };
        let mut start = lo;
        let mut pieces = Vec::new();
        for &(a, b) in &seps {
            pieces.push((start, a));
            start = b;
            out.separators.push(if horizontal {
                RoiBox::new(0, region.x0, a, region.x1, b)
            } else {
                RoiBox::new(0, a, region.y0, b, region.y1)
            });
        }
        pieces.push((start, hi));
        for (a, b) in pieces {
            if a >= b {
                return Err(Error::Segmentation(format!("zero-area panel between separators at {a}")));
            }
            let sub = if horizontal {
                Region { y0: a, y1: b, ..region }
            } else {
                Region { x0: a, x1: b, ..region }
            };
            cut(img, sub, cfg, out)?;
        }
        return Ok(());
    }
    let index = out.rois.len();
    out.rois.push(RoiBox::new(index, region.x0, region.y0, region.x1, region.y1));
    Ok(())
}

/// Automatic segmentation with the cut separators, panels in reading order.
pub fn auto_segment(img: &RgbImage, cfg: &SegmentConfig) -> Result<Segmentation> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let mut out = Segmentation { rois: Vec::new(), separators: Vec::new() };
    cut(img, Region { x0: 0, y0: 0, x1: w, y1: h }, cfg, &mut out)?;
    Ok(out)
}

pub fn segment_subimages(
    img: &RgbImage,
    mode: SegmentMode,
    manual_rois: Option<&[RoiBox]>,
    cfg: &SegmentConfig,
) -> Result<Vec<RoiBox>> {
    match mode {
        SegmentMode::Auto => Ok(auto_segment(img, cfg)?.rois),
        SegmentMode::Manual => {
            let rois = manual_rois.ok_or_else(|| Error::InvalidArgument("manual mode needs ROIs".into()))?;
            if img.width() == 0 || img.height() == 0 {
                return Err(Error::InvalidArgument("empty image".into()));
            }
            if rois.is_empty() {
                return Err(Error::Validation("manual ROI list is empty".into()));
            }
            for r in rois {
                r.validate(img.width(), img.height())?;
            }
            check_non_overlapping(rois)?;
            Ok(rois.to_vec())
        }
    }
}

pub fn crop_roi(img: &RgbImage, roi: &RoiBox) -> RgbImage {
    image::imageops::crop_imm(img, roi.x0, roi.y0, roi.width(), roi.height()).to_image()
}
