//! Feature extraction: patch-mean visual encoder, embedding text encoder, the
//! shared vocabulary and the chain-of-humor description template.

use std::collections::HashMap;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Matrix;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
/// Ids `2..2 + HASH_BUCKETS` absorb out-of-vocabulary tokens.
pub const HASH_BUCKETS: usize = 8;
const FIRST_WORD: usize = 2 + HASH_BUCKETS;

/// Longest caption the text encoder accepts.
pub const MAX_TEXT_TOKENS: usize = 1024;

/// Five-slot description of one sub-image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChainOfHumor {
    pub concept: String,
    pub emotion: String,
    pub event: String,
    pub consequence: String,
    pub humor_device: String,
}

impl ChainOfHumor {
    pub fn fields(&self) -> [(&'static str, &str); 5] {
        [
            ("concept", &self.concept),
            ("emotion", &self.emotion),
            ("event", &self.event),
            ("consequence", &self.consequence),
            ("humor_device", &self.humor_device),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in self.fields() {
            if value.trim().is_empty() {
                return Err(Error::Validation(format!("chain-of-humor field {name} is empty")));
            }
        }
        Ok(())
    }
}

/// Renders the description in the fixed slot order.
pub fn assemble_chain_of_humor(c: &ChainOfHumor) -> Result<String> {
    c.validate()?;
    Ok(format!(
        "Concept: {}. Emotion: {}. Event: {}. Consequence: {}. Humor device: {}.",
        c.concept.trim(),
        c.emotion.trim(),
        c.event.trim(),
        c.consequence.trim(),
        c.humor_device.trim()
    ))
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Token ↔ id mapping shared by the text encoder, decoder and reward model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
    /// Closed vocabularies reject unknown tokens instead of hashing them.
    pub closed: bool,
}

impl Vocab {
    /// Builds from every distinct token, sorted so the result does not depend
    /// on input order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a String>) -> Vocab {
        let mut words: Vec<String> = tokens.into_iter().cloned().collect();
        words.sort();
        words.dedup();
        Self::from_words(words, false)
    }

    pub fn from_words(words: Vec<String>, closed: bool) -> Vocab {
        let lookup = words.iter().enumerate().map(|(i, w)| (w.clone(), FIRST_WORD + i)).collect();
        Vocab { words, lookup, closed }
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(mut self) -> Vocab {
        self.lookup = self.words.iter().enumerate().map(|(i, w)| (w.clone(), FIRST_WORD + i)).collect();
        self
    }

    pub fn len(&self) -> usize {
        FIRST_WORD + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        match self.lookup.get(token) {
            Some(&i) => Ok(i),
            None if self.closed => Err(Error::Encoding(format!("token {token:?} is not in the vocabulary"))),
            None => Ok(2 + (fnv1a(token) % HASH_BUCKETS as u64) as usize),
        }
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        match id {
            BOS => "<bos>",
            EOS => "<eos>",
            i if i < FIRST_WORD => "<unk>",
            i => &self.words[i - FIRST_WORD],
        }
    }

    /// Drops the special ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().filter(|&&i| i != BOS && i != EOS).map(|&i| self.token(i).to_string()).collect()
    }
}

/// Feature rows for the areas of one sub-image.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaFeatures {
    pub matrix: Matrix,
    pub source_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub matrix: Matrix,
    pub tokens: Vec<String>,
}

pub trait VisualEncoder: Send + Sync {
    fn width(&self) -> usize;
    fn encode(&self, subimage: &RgbImage) -> Result<Matrix>;
}

pub trait TextEncoder: Send + Sync {
    fn width(&self) -> usize;
    fn encode(&self, tokens: &[String]) -> Result<Matrix>;
}

/// Splits the image into a `P × P` grid, averages each cell's RGB values
/// (scaled to `[0, 1]`) and maps the 3 means to width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMeanEncoder {
    pub grid: usize,
    /// `3 × d`
    pub weight: Matrix,
    /// `1 × d`
    pub bias: Matrix,
}

impl PatchMeanEncoder {
    pub fn new(grid: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PatchMeanEncoder { grid, weight: Matrix::randn(3, d, 1.0, &mut rng), bias: Matrix::randn(1, d, 0.5, &mut rng) }
    }

    pub fn with_weights(grid: usize, weight: Matrix, bias: Matrix) -> Self {
        PatchMeanEncoder { grid, weight, bias }
    }

    /// `P²` rows of raw channel means, row-major over the grid.
    pub fn patch_means(&self, img: &RgbImage) -> Result<Matrix> {
        let (w, h) = img.dimensions();
        let p = self.grid as u32;
        if p == 0 || w < p || h < p {
            return Err(Error::InvalidArgument(format!("{w}x{h} image is smaller than the {p}x{p} patch grid")));
        }
        let mut out = Matrix::zeros(self.grid * self.grid, 3);
        for gy in 0..p {
            let (y0, y1) = (gy * h / p, (gy + 1) * h / p);
            for gx in 0..p {
                let (x0, x1) = (gx * w / p, (gx + 1) * w / p);
                let mut sums = [0f64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let px = img.get_pixel(x, y).0;
                        for c in 0..3 {
                            sums[c] += px[c] as f64;
                        }
                    }
                }
                let count = ((x1 - x0) * (y1 - y0)) as f64 * 255.0;
                let row = out.row_mut((gy * p + gx) as usize);
                for c in 0..3 {
                    row[c] = sums[c] / count;
                }
            }
        }
        Ok(out)
    }

    pub fn to_params(&self) -> Params {
        let mut p = Params::new();
        p.insert("visual.weight", self.weight.clone());
        p.insert("visual.bias", self.bias.clone());
        p
    }
}

impl VisualEncoder for PatchMeanEncoder {
    fn width(&self) -> usize {
        self.weight.cols()
    }

    fn encode(&self, subimage: &RgbImage) -> Result<Matrix> {
        Ok(self.patch_means(subimage)?.matmul(&self.weight).add_row(&self.bias))
    }
}

pub fn encode_image_areas(subimage: &RgbImage, source_index: usize, encoder: &dyn VisualEncoder) -> Result<AreaFeatures> {
    if subimage.width() == 0 || subimage.height() == 0 {
        return Err(Error::InvalidArgument("empty sub-image".into()));
    }
    let matrix = encoder.encode(subimage)?;
    if !matrix.is_finite() {
        return Err(Error::Encoding("visual encoder produced non-finite features".into()));
    }
    Ok(AreaFeatures { matrix, source_index })
}

/// Sinusoidal position signal, `n × d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            m[(pos, i)] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

/// Embedding lookup plus sinusoidal positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTextEncoder {
    pub vocab: Vocab,
    /// `|V| × d`
    pub table: Matrix,
    pub max_len: usize,
}

impl EmbeddingTextEncoder {
    pub fn new(vocab: Vocab, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Matrix::randn(vocab.len(), d, 1.0, &mut rng);
        EmbeddingTextEncoder { vocab, table, max_len: MAX_TEXT_TOKENS }
    }

    pub fn encode_ids(&self, ids: &[usize]) -> Result<Matrix> {
        if ids.is_empty() || ids.len() > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "caption length {} outside 1..={}",
                ids.len(),
                self.max_len
            )));
        }
        Ok(self.table.select_rows(ids).add(&sinusoidal_positions(ids.len(), self.table.cols())))
    }

    pub fn to_params(&self) -> Params {
        let mut p = Params::new();
        p.insert("text.table", self.table.clone());
        p
    }
}

impl TextEncoder for EmbeddingTextEncoder {
    fn width(&self) -> usize {
        self.table.cols()
    }

    fn encode(&self, tokens: &[String]) -> Result<Matrix> {
        self.encode_ids(&self.vocab.encode(tokens)?)
    }
}

pub fn encode_caption(tokens: &[String], encoder: &dyn TextEncoder) -> Result<TokenFeatures> {
    let matrix = encoder.encode(tokens)?;
    if !matrix.is_finite() {
        return Err(Error::Encoding("text encoder produced non-finite features".into()));
    }
    Ok(TokenFeatures { matrix, tokens: tokens.to_vec() })
}

/// How enhanced-variant features join the original's.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantMode {
    #[default]
    Average,
    /// Variant rows become extra areas.
    Concat,
}

pub fn combine_variants(original: &AreaFeatures, variants: &[AreaFeatures], mode: VariantMode) -> Result<AreaFeatures> {
    let mut out = original.matrix.clone();
    match mode {
        VariantMode::Average => {
            for v in variants {
                if v.matrix.shape() != out.shape() {
                    return Err(Error::Shape(format!(
                        "variant features {:?} vs original {:?}",
                        v.matrix.shape(),
                        out.shape()
                    )));
                }
                out.add_assign(&v.matrix);
            }
            out = out.scale(1.0 / (variants.len() + 1) as f64);
        }
        VariantMode::Concat => {
            let mut parts = vec![&original.matrix];
            parts.extend(variants.iter().map(|v| &v.matrix));
            out = Matrix::vstack(&parts);
        }
    }
    Ok(AreaFeatures { matrix: out, source_index: original.source_index })
}

/// Stacks the areas of every sub-image into the meme-level area matrix.
pub fn stack_areas(parts: &[AreaFeatures]) -> Result<Matrix> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("no sub-image features".into()));
    }
    let d = parts[0].matrix.cols();
    if parts.iter().any(|p| p.matrix.cols() != d) {
        return Err(Error::Shape("sub-image features differ in width".into()));
    }
    Ok(Matrix::vstack(&parts.iter().map(|p| &p.matrix).collect::<Vec<_>>()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn dog() -> ChainOfHumor {
        ChainOfHumor {
            concept: "a dog".into(),
            emotion: "surprise".into(),
            event: "sharing a photo".into(),
            consequence: "discussing the photo".into(),
            humor_device: "anthropomorphism".into(),
        }
    }

    #[test]
    fn chain_of_humor_renders_in_slot_order() {
        let text = assemble_chain_of_humor(&dog()).unwrap();
        assert_eq!(
            text,
            "Concept: a dog. Emotion: surprise. Event: sharing a photo. Consequence: discussing the photo. Humor device: anthropomorphism."
        );
        let positions: Vec<usize> = ["a dog", "surprise", "sharing a photo", "discussing the photo", "anthropomorphism"]
            .iter()
            .map(|v| text.find(v).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(text, assemble_chain_of_humor(&dog()).unwrap());

        let mut swapped = dog();
        std::mem::swap(&mut swapped.emotion, &mut swapped.event);
        assert_ne!(assemble_chain_of_humor(&swapped).unwrap(), text);

        let mut empty = dog();
        empty.consequence = " ".into();
        assert!(assemble_chain_of_humor(&empty).is_err());
    }

    #[test]
    fn vocab_hashes_unknowns_unless_closed() {
        let toks = words("b a c a");
        let v = Vocab::build(&toks);
        assert_eq!(v.len(), FIRST_WORD + 3);
        assert_eq!(v.id("a").unwrap(), FIRST_WORD);
        let unk = v.id("zebra").unwrap();
        assert!((2..FIRST_WORD).contains(&unk));
        assert_eq!(unk, v.id("zebra").unwrap());
        let closed = Vocab::from_words(v.words().to_vec(), true);
        let err = closed.id("zebra").unwrap_err().to_string();
        assert!(err.contains("zebra"));
        assert_eq!(v.decode(&[BOS, FIRST_WORD + 1, EOS]), ["b"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str::<Vocab>(&json).unwrap().reindex();
        assert_eq!(back, v);
    }

    #[test]
    fn solid_image_gives_identical_rows() {
        let img = RgbImage::from_pixel(37, 23, Rgb([10, 200, 90]));
        let enc = PatchMeanEncoder::new(4, 16, 1);
        let f = encode_image_areas(&img, 0, &enc).unwrap();
        assert_eq!(f.matrix.shape(), (16, 16));
        for r in 1..16 {
            assert_eq!(f.matrix.row(r), f.matrix.row(0));
        }
        let big = RgbImage::from_pixel(300, 200, Rgb([1, 2, 3]));
        assert_eq!(encode_image_areas(&big, 0, &enc).unwrap().matrix.rows(), 16);
        assert!(encode_image_areas(&RgbImage::new(3, 3), 0, &enc).is_err());
    }

    #[test]
    fn two_tone_patch_means() {
        // left half red-ish, right half blue-ish; top rows brighter
        let img = RgbImage::from_fn(8, 8, |x, y| {
            let base = if y < 4 { 200 } else { 100 };
            if x < 4 {
                Rgb([base, 0, 0])
            } else {
                Rgb([0, 0, base])
            }
        });
        let enc = PatchMeanEncoder::with_weights(2, Matrix::identity(3), Matrix::zeros(1, 3));
        let f = encode_image_areas(&img, 0, &enc).unwrap().matrix;
        let expected = Matrix::from_rows(&[
            vec![200.0 / 255.0, 0.0, 0.0],
            vec![0.0, 0.0, 200.0 / 255.0],
            vec![100.0 / 255.0, 0.0, 0.0],
            vec![0.0, 0.0, 100.0 / 255.0],
        ]);
        assert!(f.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn features_depend_only_on_the_subimage() {
        let enc = PatchMeanEncoder::new(4, 8, 3);
        let panel = RgbImage::from_fn(20, 20, |x, y| Rgb([(x * 12) as u8, (y * 12) as u8, 77]));
        let mut a = RgbImage::from_pixel(60, 40, Rgb([255, 0, 0]));
        let mut b = RgbImage::from_pixel(60, 40, Rgb([0, 255, 255]));
        image::imageops::replace(&mut a, &panel, 30, 10);
        image::imageops::replace(&mut b, &panel, 30, 10);
        let crop = |img: &RgbImage| image::imageops::crop_imm(img, 30, 10, 20, 20).to_image();
        assert_eq!(enc.encode(&crop(&a)).unwrap(), enc.encode(&crop(&b)).unwrap());
    }

    #[test]
    fn caption_encoding_shape_and_consistency() {
        let all = words("the cat sat on a mat dog ran");
        let enc = EmbeddingTextEncoder::new(Vocab::build(&all), 8, 5);
        assert_eq!(encode_caption(&words("cat"), &enc).unwrap().matrix.rows(), 1);
        let a = encode_caption(&words("the cat sat"), &enc).unwrap();
        let b = encode_caption(&words("a cat ran"), &enc).unwrap();
        assert_eq!(a.matrix.row(1), b.matrix.row(1));
        assert_ne!(a.matrix.row(0), b.matrix.row(0));
        assert_eq!(a, encode_caption(&words("the cat sat"), &enc).unwrap());
        assert!(encode_caption(&[], &enc).is_err());
        let long: Vec<String> = vec!["cat".into(); MAX_TEXT_TOKENS + 1];
        assert!(encode_caption(&long, &enc).is_err());
    }

    #[test]
    fn variants_average_or_concat() {
        let o = AreaFeatures { matrix: Matrix::filled(2, 2, 1.0), source_index: 1 };
        let v = AreaFeatures { matrix: Matrix::filled(2, 2, 3.0), source_index: 1 };
        let avg = combine_variants(&o, &[v.clone()], VariantMode::Average).unwrap();
        assert_eq!(avg.matrix, Matrix::filled(2, 2, 2.0));
        let cat = combine_variants(&o, &[v], VariantMode::Concat).unwrap();
        assert_eq!(cat.matrix.rows(), 4);
    }

    proptest! {
        #[test]
        fn features_are_finite(w in 4u32..40, h in 4u32..40, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = RgbImage::from_fn(w, h, |_, _| {
                use rand::Rng;
                Rgb([rng.gen(), rng.gen(), rng.gen()])
            });
            let enc = PatchMeanEncoder::new(4, 8, seed);
            prop_assert!(encode_image_areas(&img, 0, &enc).unwrap().matrix.is_finite());
            let text = EmbeddingTextEncoder::new(Vocab::build(&words("x y")), 8, seed);
            let toks: Vec<String> = (0..(w as usize)).map(|i| format!("t{i}")).collect();
            prop_assert!(encode_caption(&toks, &text).unwrap().matrix.is_finite());
        }
    }
}
