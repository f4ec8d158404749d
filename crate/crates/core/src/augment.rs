//! Image and caption variants: lossless crops and right-angle rotations for
//! sub-images, pluggable paraphrasers for captions.

use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Table bundled with the crate.
pub const DEFAULT_SYNONYMS: &str = include_str!("../data/synonyms.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub fn from_degrees(deg: u32) -> Result<Rotation> {
        match deg % 360 {
            0 => Ok(Rotation::R0),
            90 => Ok(Rotation::R90),
            180 => Ok(Rotation::R180),
            270 => Ok(Rotation::R270),
            other => Err(Error::InvalidArgument(format!("rotation by {other} degrees is not a right angle"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentOp {
    Identity,
    /// Fractional window `[x0, x1) × [y0, y1)` of the sub-image.
    Crop { x0: f64, y0: f64, x1: f64, y1: f64 },
    /// Window of relative side `scale` at a seeded random offset.
    RandomCrop { scale: f64 },
    /// Clockwise.
    Rotate { rotation: Rotation },
}

impl AugmentOp {
    pub fn rotate(degrees: u32) -> Result<AugmentOp> {
        Ok(AugmentOp::Rotate { rotation: Rotation::from_degrees(degrees)? })
    }
}

/// The two variants produced per sub-image unless configured otherwise.
pub fn default_ops() -> Vec<AugmentOp> {
    vec![AugmentOp::RandomCrop { scale: 0.8 }, AugmentOp::Rotate { rotation: Rotation::R90 }]
}

fn crop_fraction(img: &RgbImage, x0: f64, y0: f64, x1: f64, y1: f64) -> Result<RgbImage> {
    let ok = |a: f64, b: f64| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a < b;
    if !ok(x0, x1) || !ok(y0, y1) {
        return Err(Error::InvalidArgument(format!("crop window ({x0}, {y0}, {x1}, {y1}) is not inside the unit square")));
    }
    let (w, h) = (img.width() as f64, img.height() as f64);
    let px0 = (x0 * w).floor() as u32;
    let py0 = (y0 * h).floor() as u32;
    let px1 = ((x1 * w).round() as u32).min(img.width());
    let py1 = ((y1 * h).round() as u32).min(img.height());
    if px1 <= px0 || py1 <= py0 {
        return Err(Error::InvalidArgument(format!(
            "crop window ({x0}, {y0}, {x1}, {y1}) collapses to zero pixels on a {}x{} image",
            img.width(),
            img.height()
        )));
    }
    Ok(image::imageops::crop_imm(img, px0, py0, px1 - px0, py1 - py0).to_image())
}

pub fn rotate(img: &RgbImage, rotation: Rotation) -> RgbImage {
    match rotation {
        Rotation::R0 => img.clone(),
        Rotation::R90 => image::imageops::rotate90(img),
        Rotation::R180 => image::imageops::rotate180(img),
        Rotation::R270 => image::imageops::rotate270(img),
    }
}

/// One output per op, in op order.
pub fn augment_image(subimage: &RgbImage, ops: &[AugmentOp], seed: u64) -> Result<Vec<RgbImage>> {
    if subimage.width() == 0 || subimage.height() == 0 {
        return Err(Error::InvalidArgument("empty sub-image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ops.iter()
        .map(|op| match *op {
            AugmentOp::Identity => Ok(subimage.clone()),
            AugmentOp::Crop { x0, y0, x1, y1 } => crop_fraction(subimage, x0, y0, x1, y1),
            AugmentOp::RandomCrop { scale } => {
                if !(scale > 0.0 && scale <= 1.0) {
                    return Err(Error::InvalidArgument(format!("crop scale {scale} outside (0, 1]")));
                }
                let (w, h) = subimage.dimensions();
                let cw = ((scale * w as f64).round() as u32).clamp(1, w);
                let ch = ((scale * h as f64).round() as u32).clamp(1, h);
                let x0 = rng.gen_range(0..=w - cw);
                let y0 = rng.gen_range(0..=h - ch);
                Ok(image::imageops::crop_imm(subimage, x0, y0, cw, ch).to_image())
            }
            AugmentOp::Rotate { rotation } => Ok(rotate(subimage, rotation)),
        })
        .collect()
}

/// Text-to-text rewrite used for caption variants.
pub trait Paraphraser: Send + Sync {
    fn name(&self) -> &str;
    fn paraphrase(&self, text: &str) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityParaphraser;

impl Paraphraser for IdentityParaphraser {
    fn name(&self) -> &str {
        "identity"
    }

    fn paraphrase(&self, text: &str) -> String {
        text.to_string()
    }
}

/// Whole-word substitution from a `source<TAB>target` table. Case-sensitive;
/// punctuation and spacing are kept as they are.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynonymTable {
    map: HashMap<String, String>,
}

impl SynonymTable {
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<SynonymTable> {
        let mut map = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(s), Some(t), None) if !s.trim().is_empty() && !t.trim().is_empty() => {
                    map.insert(s.trim().to_string(), t.trim().to_string());
                }
                _ => return Err(Error::Validation(format!("synonym table line {}: expected two columns", n + 1))),
            }
        }
        Ok(SynonymTable { map })
    }

    pub fn load(path: &Path) -> Result<SynonymTable> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn bundled() -> SynonymTable {
        Self::parse(DEFAULT_SYNONYMS).expect("bundled table parses")
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> SynonymTable {
        SynonymTable { map: pairs.into_iter().map(|(a, b)| (a.to_string(), b.to_string())).collect() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Paraphraser for SynonymTable {
    fn name(&self) -> &str {
        "synonym-table"
    }

    fn paraphrase(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut String| {
            if !word.is_empty() {
                out.push_str(self.map.get(word.as_str()).map(String::as_str).unwrap_or(word));
                word.clear();
            }
        };
        for c in text.chars() {
            if c.is_alphanumeric() || c == '\'' {
                word.push(c);
            } else {
                flush(&mut word, &mut out);
                out.push(c);
            }
        }
        flush(&mut word, &mut out);
        out
    }
}

pub fn augment_text(caption: &str, paraphraser: &dyn Paraphraser) -> Result<String> {
    if caption.trim().is_empty() {
        return Err(Error::InvalidArgument("cannot paraphrase an empty caption".into()));
    }
    let out = paraphraser.paraphrase(caption);
    if out.trim().is_empty() {
        return Err(Error::InvalidArgument(format!("paraphraser {} returned empty text", paraphraser.name())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7) as u8, (y * 11) as u8, ((x * y) % 256) as u8]))
    }

    #[test]
    fn identity_rotation_and_full_crop() {
        let img = gradient(13, 7);
        let copy = img.clone();
        let ops = [AugmentOp::rotate(0).unwrap(), AugmentOp::Crop { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }];
        let out = augment_image(&img, &ops, 1).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], img);
        assert_eq!(out[1], img);
        assert_eq!(img, copy);
    }

    #[test]
    fn quarter_turn_twice_is_half_turn() {
        let img = gradient(9, 5);
        let once = augment_image(&img, &[AugmentOp::rotate(90).unwrap()], 0).unwrap().remove(0);
        assert_eq!(once.dimensions(), (5, 9));
        // clockwise: source (x, y) lands at (h - 1 - y, x)
        assert_eq!(once.get_pixel(5 - 1 - 2, 3), img.get_pixel(3, 2));
        let twice = rotate(&once, Rotation::R90);
        let half = RgbImage::from_fn(9, 5, |x, y| *img.get_pixel(9 - 1 - x, 5 - 1 - y));
        assert_eq!(twice, half);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let img = gradient(6, 11);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate(&r, Rotation::R90);
        }
        assert_eq!(r, img);
        assert!(AugmentOp::rotate(45).is_err());
    }

    #[test]
    fn degenerate_crops_fail() {
        let img = gradient(4, 4);
        let thin = AugmentOp::Crop { x0: 0.5, y0: 0.0, x1: 0.55, y1: 1.0 };
        assert!(augment_image(&img, &[thin], 0).is_err());
        let inverted = AugmentOp::Crop { x0: 0.6, y0: 0.0, x1: 0.5, y1: 1.0 };
        assert!(augment_image(&img, &[inverted], 0).is_err());
    }

    #[test]
    fn random_crop_is_seeded() {
        let img = gradient(40, 30);
        let ops = [AugmentOp::RandomCrop { scale: 0.5 }];
        let a = augment_image(&img, &ops, 9).unwrap();
        assert_eq!(a, augment_image(&img, &ops, 9).unwrap());
        assert_eq!(a[0].dimensions(), (20, 15));
    }

    #[test]
    fn paraphrasers() {
        assert_eq!(augment_text("connected but no internet", &IdentityParaphraser).unwrap(), "connected but no internet");
        let table = SynonymTable::from_pairs([("sofa", "couch")]);
        assert_eq!(augment_text("where there is a sofa", &table).unwrap(), "where there is a couch");
        assert_eq!(table.paraphrase("sofa, sofas!"), "couch, sofas!");
        assert!(augment_text("", &table).is_err());
        assert!(augment_text("   ", &IdentityParaphraser).is_err());

        struct Blank;
        impl Paraphraser for Blank {
            fn name(&self) -> &str {
                "blank"
            }
            fn paraphrase(&self, _: &str) -> String {
                String::new()
            }
        }
        assert!(augment_text("hi", &Blank).unwrap_err().to_string().contains("blank"));
    }

    #[test]
    fn table_parsing() {
        let t = SynonymTable::bundled();
        assert!(t.len() > 10);
        assert_eq!(t.paraphrase("my sofa"), "my couch");
        assert!(SynonymTable::parse("a\tb\tc").is_err());
        assert!(SynonymTable::parse("justone").is_err());
    }

    proptest! {
        #[test]
        fn disjoint_table_is_idempotent(words in prop::collection::vec("[a-f]{1,3}", 1..12)) {
            let table = SynonymTable::from_pairs([("a", "x"), ("bc", "yy"), ("fed", "zz z")]);
            let text = words.join(" ");
            let once = table.paraphrase(&text);
            prop_assert_eq!(table.paraphrase(&once), once);
        }
    }
}
