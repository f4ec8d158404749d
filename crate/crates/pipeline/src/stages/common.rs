//! Loaders shared by the stages that consume earlier artifacts.

use std::collections::BTreeMap;
use std::path::PathBuf;

use memecap_core::align::AlignParams;
use memecap_core::corpus::{load_manifest, MemeRecord, Split};
use memecap_core::decoder::{Conditioning, Decoder};
use memecap_core::encode::{EmbeddingTextEncoder, Vocab};
use memecap_core::params::Params;
use memecap_core::sft::image_conditioning;
use memecap_core::tokenize::{Tokenizer, WhitespacePunct};
use memecap_core::{Error, Matrix};
use serde::{Deserialize, Serialize};

use crate::config::ConditioningMode;
use crate::workspace::{read_bytes, read_text, StageRun};
use crate::{PipelineError, Result, Stage};

pub const MANIFEST: &str = "manifest.jsonl";
pub const ROIS: &str = "rois.json";
pub const FEATURES: &str = "features.blob";
pub const TEXT: &str = "text.jsonl";
pub const ALIGN: &str = "align.blob";
pub const DECODER: &str = "decoder.blob";
pub const SETS: &str = "sets.json";
pub const ATTENTION: &str = "attention.jsonl";
pub const ANNOTATION_SETS: &str = "annotation_sets.json";
pub const HUMAN_PREFERENCES: &str = "preferences.jsonl";
pub const REWARD: &str = "reward.blob";
pub const POLICY: &str = "policy.blob";
pub const REPORT: &str = "report.jsonl";
pub const CAPTIONS: &str = "captions.jsonl";

pub const AREAS_PREFIX: &str = "areas/";

pub struct Corpus {
    pub records: Vec<MemeRecord>,
    pub dir: PathBuf,
}

impl Corpus {
    pub fn image_path(&self, r: &MemeRecord) -> PathBuf {
        r.image_location(&self.dir)
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }
}

pub fn load_corpus(run: &mut StageRun) -> Result<Corpus> {
    let path = run.input(Stage::Ingest, MANIFEST)?;
    let records = load_manifest(&path)?;
    Ok(Corpus { records, dir: path.parent().expect("manifest has a directory").to_path_buf() })
}

pub fn load_rgb(path: &std::path::Path) -> Result<image::RgbImage> {
    Ok(image::open(path).map_err(Error::from)?.to_rgb8())
}

/// Text side of one meme as written by `augment`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemeText {
    pub id: String,
    pub reference: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paraphrase: Option<Vec<String>>,
    /// Rendered chain-of-humor tokens; empty when the record has none.
    #[serde(default)]
    pub chain_of_humor: Vec<String>,
}

pub struct Features {
    pub areas: BTreeMap<String, Matrix>,
    pub text: EmbeddingTextEncoder,
    /// In manifest order.
    pub texts: Vec<MemeText>,
}

impl Features {
    pub fn vocab(&self) -> &Vocab {
        &self.text.vocab
    }

    pub fn areas_of(&self, id: &str) -> Result<&Matrix> {
        self.areas.get(id).ok_or_else(|| PipelineError::Validation(format!("no area features for {id}")))
    }

    /// Reference caption ids, cut to `max_len`.
    pub fn reference_ids(&self, i: usize, max_len: usize) -> Result<Vec<usize>> {
        let mut ids = self.vocab().encode(&self.texts[i].reference)?;
        if ids.len() > max_len {
            log::warn!("{}: caption cut from {} to {max_len} tokens", self.texts[i].id, ids.len());
            ids.truncate(max_len);
        }
        Ok(ids)
    }

    pub fn conditioning_tokens(&self, i: usize, mode: ConditioningMode, prompt: &str) -> Vec<String> {
        match mode {
            ConditioningMode::ChainOfHumor => self.texts[i].chain_of_humor.clone(),
            ConditioningMode::Baseline => WhitespacePunct.tokenize(prompt),
            ConditioningMode::None => Vec::new(),
        }
    }

    pub fn conditioning_ids(&self, i: usize, run: &StageRun) -> Result<Vec<usize>> {
        let sft = &run.ws.config.stage.sft;
        Ok(self.vocab().encode(&self.conditioning_tokens(i, sft.conditioning, &sft.baseline_prompt))?)
    }

    /// What the decoder sees for meme `i`.
    pub fn conditioning(&self, i: usize, run: &StageRun, align: &AlignParams) -> Result<Conditioning> {
        let coh_ids = self.conditioning_ids(i, run)?;
        let coh = if coh_ids.is_empty() { None } else { Some(self.text.encode_ids(&coh_ids)?) };
        let image = image_conditioning(self.areas_of(&self.texts[i].id)?, coh.as_ref(), align)?;
        Ok(Conditioning { image, coh_ids })
    }
}

pub fn load_features(run: &mut StageRun) -> Result<Features> {
    let blob_path = run.input(Stage::Augment, FEATURES)?;
    let text_path = run.input(Stage::Augment, TEXT)?;
    let blob = Params::from_blob(&read_bytes(&blob_path)?)?;
    let words: Vec<String> = serde_json::from_value(blob.meta["vocab"].clone())?;
    let max_len = blob.meta["max_text_len"].as_u64().unwrap_or(memecap_core::encode::MAX_TEXT_TOKENS as u64) as usize;
    let vocab = Vocab::from_words(words, false);
    let table = blob.params.get("text.table").clone();
    if table.rows() != vocab.len() {
        return Err(PipelineError::Validation(format!(
            "{}: text table has {} rows for {} vocabulary entries",
            blob_path.display(),
            table.rows(),
            vocab.len()
        )));
    }
    let mut areas = BTreeMap::new();
    for (name, m) in blob.params.iter() {
        if let Some(id) = name.strip_prefix(AREAS_PREFIX) {
            areas.insert(id.to_string(), m.clone());
        }
    }
    let texts = read_text(&text_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<MemeText>, _>>()?;
    Ok(Features { areas, text: EmbeddingTextEncoder { vocab, table, max_len }, texts })
}

pub fn align_blob(params: &AlignParams, meta: serde_json::Value) -> Vec<u8> {
    let mut meta = meta;
    meta["d_k"] = params.d_k.into();
    meta["tau"] = params.tau.into();
    params.params.to_blob("align", &meta)
}

pub fn load_align(run: &mut StageRun, producer: Stage) -> Result<AlignParams> {
    let path = run.input(producer, ALIGN)?;
    let blob = Params::from_blob(&read_bytes(&path)?)?;
    let d_k = blob.meta["d_k"].as_u64().ok_or_else(|| PipelineError::Validation(format!("{}: no d_k", path.display())))?;
    let tau = blob.meta["tau"].as_f64().ok_or_else(|| PipelineError::Validation(format!("{}: no tau", path.display())))?;
    Ok(AlignParams::from_params(blob.params, d_k as usize, tau)?)
}

pub fn load_decoder(run: &mut StageRun, producer: Stage, name: &str) -> Result<Decoder> {
    let path = run.input(producer, name)?;
    Ok(Decoder::from_blob(&read_bytes(&path)?)?.0)
}

/// Non-empty lines of a JSONL file.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| PipelineError::Validation(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

/// Sub-seed for item `i` of a stage.
pub fn item_seed(base: u64, i: usize) -> u64 {
    base ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
