//! Procedural corpus for desk-scale runs.
//!
//! Every panel is a textured colour field with one brightened quadrant; the
//! colour and the quadrant decide the words the caption uses for it. Panels
//! of multi-image memes sit on a grid separated by white bands, so the
//! planted ROIs are exactly what separator detection should find.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use memecap_core::corpus::{save_manifest, MemeRecord, RoiBox, Sentiment, Split, Structure};
use memecap_core::encode::ChainOfHumor;
use memecap_core::tokenize::{Tokenizer, WhitespacePunct};
use memecap_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Token whose frequency the RL checks steer.
pub const MARKER: &str = "lol";

pub const COLOURS: [(&str, [u8; 3]); 6] = [
    ("red", [190, 50, 50]),
    ("green", [50, 170, 60]),
    ("blue", [50, 70, 190]),
    ("yellow", [190, 180, 50]),
    ("purple", [140, 60, 170]),
    ("orange", [200, 120, 40]),
];

/// Indexed by the brightened quadrant: top-left, top-right, bottom-left, bottom-right.
pub const SUBJECTS: [&str; 4] = ["cat", "dog", "boss", "coffee"];

/// Rows × columns of multi-image layouts.
const LAYOUTS: [(u32, u32); 4] = [(1, 2), (2, 1), (1, 3), (2, 2)];

const BRIGHTEN: i32 = 45;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub marker_fraction: f64,
    pub chain_of_humor: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { marker_fraction: 0.125, chain_of_humor: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Panel {
    pub colour: usize,
    pub subject: usize,
}

impl Panel {
    pub fn phrase(&self) -> String {
        format!("{} {}", COLOURS[self.colour].0, SUBJECTS[self.subject])
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticMeme {
    pub record: MemeRecord,
    pub image: RgbImage,
    pub panels: Vec<Panel>,
    pub marker: bool,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub memes: Vec<SyntheticMeme>,
}

fn single_caption(s: Sentiment, a: &str) -> String {
    match s {
        Sentiment::SelfPraise => format!("me being the {a} everyone needs"),
        Sentiment::PraiseOthers => format!("the {a} really saved the day"),
        Sentiment::SelfMockery => format!("me pretending to be a {a}"),
        Sentiment::MockOthers => format!("that {a} thinks it is smart"),
    }
}

fn multi_caption(s: Sentiment, a: &str, b: &str) -> String {
    match s {
        Sentiment::SelfPraise => format!("me as a {a} , then me as a {b}"),
        Sentiment::PraiseOthers => format!("the {a} helps the {b}"),
        Sentiment::SelfMockery => format!("i wanted a {a} but got a {b}"),
        Sentiment::MockOthers => format!("the {a} looks at the {b} and laughs"),
    }
}

fn chain_entry(s: Sentiment, p: &Panel) -> ChainOfHumor {
    let (emotion, device) = match s {
        Sentiment::SelfPraise => ("pride", "exaggeration"),
        Sentiment::PraiseOthers => ("admiration", "contrast"),
        Sentiment::SelfMockery => ("embarrassment", "self deprecation"),
        Sentiment::MockOthers => ("scorn", "sarcasm"),
    };
    ChainOfHumor {
        concept: p.phrase(),
        emotion: emotion.into(),
        event: format!("the {} shows up", SUBJECTS[p.subject]),
        consequence: "everyone notices".into(),
        humor_device: device.into(),
    }
}

/// Textured fill of `[x0, x0 + w) × [y0, y0 + h)`.
fn draw_panel(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, panel: &Panel, rng: &mut ChaCha8Rng) {
    let base = COLOURS[panel.colour].1;
    for y in 0..h {
        for x in 0..w {
            let quadrant = (2 * y / h) * 2 + 2 * x / w;
            let lift = if quadrant as usize == panel.subject { BRIGHTEN } else { 0 };
            let ramp = ((x + y) % 40) as i32 - 20;
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let noise = rng.gen_range(-30..=30);
                *v = (base[c] as i32 + ramp + noise + lift).clamp(0, 255) as u8;
            }
            img.put_pixel(x0 + x, y0 + y, Rgb(px));
        }
    }
}

fn meme_id(i: usize) -> String {
    format!("meme-{i:04}")
}

/// Balanced by construction: structure alternates, sentiment cycles every
/// two records and every fourth record of each (structure, sentiment) cell
/// goes to the test split.
pub fn generate_synthetic_corpus(size: usize, seed: u64) -> Result<SyntheticCorpus> {
    generate_synthetic_corpus_with(size, seed, &SynthOptions::default())
}

pub fn generate_synthetic_corpus_with(size: usize, seed: u64, opts: &SynthOptions) -> Result<SyntheticCorpus> {
    if size < 2 {
        return Err(Error::InvalidArgument(format!("synthetic corpus needs at least 2 records, got {size}")));
    }
    if !(0.0..=1.0).contains(&opts.marker_fraction) {
        return Err(Error::InvalidArgument(format!("marker fraction {} outside [0, 1]", opts.marker_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut marked: Vec<usize> = (0..size).collect();
    marked.shuffle(&mut rng);
    marked.truncate((opts.marker_fraction * size as f64).round() as usize);

    let tokenizer = WhitespacePunct;
    let mut memes = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1));
        let structure = Structure::ALL[i % 2];
        let sentiment = Sentiment::ALL[(i / 2) % 4];
        let split = if (i / 8) % 4 == 3 { Split::Test } else { Split::Train };
        let (rows, cols) = match structure {
            Structure::Single => (1, 1),
            Structure::Multi => LAYOUTS[rng.gen_range(0..LAYOUTS.len())],
        };
        let (pw, ph, band) = match structure {
            Structure::Single => (rng.gen_range(48..=64), rng.gen_range(48..=64), 0),
            Structure::Multi => (rng.gen_range(40..=52), rng.gen_range(40..=52), rng.gen_range(4..=6)),
        };
        let width = cols * pw + (cols - 1) * band;
        let height = rows * ph + (rows - 1) * band;
        let mut image = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
        let mut panels = Vec::new();
        let mut rois = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let panel = Panel { colour: rng.gen_range(0..COLOURS.len()), subject: rng.gen_range(0..SUBJECTS.len()) };
                let (x0, y0) = (c * (pw + band), r * (ph + band));
                draw_panel(&mut image, x0, y0, pw, ph, &panel, &mut rng);
                rois.push(RoiBox::new(rois.len(), x0, y0, x0 + pw, y0 + ph));
                panels.push(panel);
            }
        }
        let mut caption = match structure {
            Structure::Single => single_caption(sentiment, &panels[0].phrase()),
            Structure::Multi => multi_caption(sentiment, &panels[0].phrase(), &panels[panels.len() - 1].phrase()),
        };
        let marker = marked.contains(&i);
        if marker {
            caption.push(' ');
            caption.push_str(MARKER);
        }
        let id = meme_id(i);
        let record = MemeRecord {
            image_path: PathBuf::from(format!("images/{id}.png")),
            id,
            image_size: (width, height),
            structure,
            sentiment,
            caption_tokens: tokenizer.tokenize(&caption),
            caption,
            rois,
            split,
            chain_of_humor: opts.chain_of_humor.then(|| panels.iter().map(|p| chain_entry(sentiment, p)).collect()),
        };
        record.validate()?;
        memes.push(SyntheticMeme { record, image, panels, marker });
    }
    Ok(SyntheticCorpus { memes })
}

impl SyntheticCorpus {
    pub fn records(&self) -> Vec<MemeRecord> {
        self.memes.iter().map(|m| m.record.clone()).collect()
    }

    /// Writes `manifest.jsonl` and the PNGs under `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
        for m in &self.memes {
            m.image.save(dir.join(&m.record.image_path))?;
        }
        let manifest = dir.join("manifest.jsonl");
        save_manifest(&manifest, &self.records())?;
        Ok(manifest)
    }
}
