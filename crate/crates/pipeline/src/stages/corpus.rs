//! ingest, segment and augment.

use std::collections::BTreeMap;

use memecap_core::augment::{augment_image, augment_text, SynonymTable};
use memecap_core::corpus::{compute_stats, load_manifest, save_manifest, MemeRecord, RoiBox, Split, Structure};
use memecap_core::encode::{
    assemble_chain_of_humor, combine_variants, encode_image_areas, stack_areas, EmbeddingTextEncoder, PatchMeanEncoder, Vocab,
};
use memecap_core::params::Params;
use memecap_core::segment::{crop_roi, segment_subimages, SegmentMode};
use memecap_core::tokenize::{Tokenizer, WhitespacePunct};
use memecap_core::Matrix;
use serde::{Deserialize, Serialize};

use super::common::*;
use crate::synth::{generate_synthetic_corpus_with, SynthOptions};
use crate::workspace::{io_err, par_map, read_text, StageRun};
use crate::{PipelineError, Result, Stage};

pub fn ingest(run: &mut StageRun) -> Result<()> {
    let cfg = run.ws.config.stage.ingest.clone();
    let records = match &cfg.manifest {
        Some(path) => {
            run.external_input(path)?;
            let source_dir = path.parent().unwrap_or(std::path::Path::new("."));
            let mut records = load_manifest(path)?;
            for r in records.iter_mut() {
                let from = r.image_location(source_dir);
                let ext = from.extension().and_then(|e| e.to_str()).unwrap_or("png").to_string();
                let bytes = std::fs::read(&from).map_err(|e| io_err(&from, e))?;
                let rel = format!("images/{}.{ext}", r.id);
                run.write(&rel, &bytes)?;
                r.image_path = rel.into();
            }
            records
        }
        None => {
            let opts = SynthOptions { marker_fraction: cfg.marker_fraction, chain_of_humor: cfg.chain_of_humor };
            let corpus = generate_synthetic_corpus_with(cfg.synthetic_size, run.ws.config.seed, &opts)?;
            for m in &corpus.memes {
                let path = run.path(&m.record.image_path.to_string_lossy());
                std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| io_err(&path, e))?;
                m.image.save(&path).map_err(memecap_core::Error::from)?;
                run.record(&path)?;
            }
            corpus.records()
        }
    };
    let manifest = run.path(MANIFEST);
    save_manifest(&manifest, &records)?;
    run.record(&manifest)?;
    let stats = compute_stats(&records)?;
    run.write_json("stats.json", &serde_json::json!({ "config_hash": run.ws.config_hash(), "stats": stats }))?;
    log::info!("ingest: {} records", records.len());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedMeme {
    pub id: String,
    pub rois: Vec<[u32; 4]>,
    /// `auto`, `manifest`, or `fallback` when automatic segmentation failed.
    pub source: String,
    /// Worst best-match IoU of a manifest ROI against the automatic ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFile {
    pub config_hash: String,
    pub memes: Vec<SegmentedMeme>,
}

/// For every planted box, its best IoU among `found`; the minimum over boxes.
pub fn worst_match_iou(planted: &[RoiBox], found: &[RoiBox]) -> f64 {
    planted
        .iter()
        .map(|p| found.iter().map(|f| p.iou(f)).fold(0.0, f64::max))
        .fold(1.0, f64::min)
}

pub fn segment(run: &mut StageRun) -> Result<()> {
    let corpus = load_corpus(run)?;
    let cfg = run.ws.config.stage.segment.clone();
    let core_cfg = cfg.core();
    let results = par_map(&corpus.records, run.ws.workers, |_, r| -> Result<SegmentedMeme> {
        let coords = |rs: &[RoiBox]| rs.iter().map(RoiBox::coords).collect::<Vec<_>>();
        if r.structure == Structure::Single || cfg.mode == SegmentMode::Manual {
            return Ok(SegmentedMeme { id: r.id.clone(), rois: coords(&r.rois), source: "manifest".into(), planted_iou: None });
        }
        let img = load_rgb(&corpus.image_path(r))?;
        match segment_subimages(&img, SegmentMode::Auto, None, &core_cfg) {
            Ok(found) if found.len() >= 2 => {
                let iou = worst_match_iou(&r.rois, &found);
                Ok(SegmentedMeme { id: r.id.clone(), rois: coords(&found), source: "auto".into(), planted_iou: Some(iou) })
            }
            Ok(found) => {
                log::warn!("{}: automatic segmentation found {} panel(s); using the manifest ROIs", r.id, found.len());
                Ok(SegmentedMeme { id: r.id.clone(), rois: coords(&r.rois), source: "fallback".into(), planted_iou: None })
            }
            Err(e) => {
                log::warn!("{}: {e}; using the manifest ROIs", r.id);
                Ok(SegmentedMeme { id: r.id.clone(), rois: coords(&r.rois), source: "fallback".into(), planted_iou: None })
            }
        }
    });
    let memes = results.into_iter().collect::<Result<Vec<_>>>()?;
    let ious: Vec<f64> = memes.iter().filter_map(|m| m.planted_iou).collect();
    let report = serde_json::json!({
        "config_hash": run.ws.config_hash(),
        "auto_segmented": ious.len(),
        "fallbacks": memes.iter().filter(|m| m.source == "fallback").count(),
        "mean_iou": if ious.is_empty() { None } else { Some(ious.iter().sum::<f64>() / ious.len() as f64) },
        "min_iou": ious.iter().copied().reduce(f64::min),
        "below_0_9": ious.iter().filter(|v| **v < 0.9).count(),
    });
    run.write_json(ROIS, &SegmentFile { config_hash: run.ws.config_hash().into(), memes })?;
    run.write_json("report.json", &report)?;
    Ok(())
}

pub fn load_rois(run: &mut StageRun) -> Result<BTreeMap<String, Vec<RoiBox>>> {
    let path = run.input(Stage::Segment, ROIS)?;
    let file: SegmentFile = serde_json::from_str(&read_text(&path)?)?;
    Ok(file
        .memes
        .into_iter()
        .map(|m| {
            let rois = m.rois.iter().enumerate().map(|(i, c)| RoiBox::new(i, c[0], c[1], c[2], c[3])).collect();
            (m.id, rois)
        })
        .collect())
}

fn chain_tokens(r: &MemeRecord) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for c in r.chain_of_humor.iter().flatten() {
        out.extend(WhitespacePunct.tokenize(&assemble_chain_of_humor(c)?));
    }
    Ok(out)
}

pub fn augment(run: &mut StageRun) -> Result<()> {
    let corpus = load_corpus(run)?;
    let rois = load_rois(run)?;
    let cfg = run.ws.config.stage.augment.clone();
    let seed = run.ws.seed_for(Stage::Augment);
    let table = match &cfg.synonyms {
        Some(p) => {
            run.external_input(p)?;
            SynonymTable::load(p)?
        }
        None => SynonymTable::bundled(),
    };
    let visual = PatchMeanEncoder::new(cfg.grid, cfg.d, seed);
    let areas = par_map(&corpus.records, run.ws.workers, |i, r| -> Result<Matrix> {
        let img = load_rgb(&corpus.image_path(r))?;
        let boxes = rois.get(&r.id).ok_or_else(|| PipelineError::Validation(format!("no ROIs for {}", r.id)))?;
        let mut parts = Vec::with_capacity(boxes.len());
        for roi in boxes {
            let sub = crop_roi(&img, roi);
            let original = encode_image_areas(&sub, roi.index, &visual)?;
            let variants = augment_image(&sub, &cfg.ops, item_seed(seed, i * 64 + roi.index))?
                .iter()
                .map(|v| encode_image_areas(v, roi.index, &visual))
                .collect::<memecap_core::Result<Vec<_>>>()?;
            parts.push(combine_variants(&original, &variants, cfg.variant_mode)?);
        }
        Ok(stack_areas(&parts)?)
    });

    let mut texts = Vec::with_capacity(corpus.records.len());
    for r in &corpus.records {
        let paraphrase = if cfg.paraphrase && r.split == Split::Train {
            let p = WhitespacePunct.tokenize(&augment_text(&r.caption, &table)?);
            (p != r.caption_tokens).then_some(p)
        } else {
            None
        };
        texts.push(MemeText { id: r.id.clone(), reference: r.caption_tokens.clone(), paraphrase, chain_of_humor: chain_tokens(r)? });
    }
    let sft = &run.ws.config.stage.sft;
    let prompt = WhitespacePunct.tokenize(&sft.baseline_prompt);
    let mut words: Vec<&String> = prompt.iter().collect();
    for (t, r) in texts.iter().zip(&corpus.records) {
        if r.split == Split::Train {
            words.extend(&t.reference);
            words.extend(t.paraphrase.iter().flatten());
        }
        words.extend(&t.chain_of_humor);
    }
    let vocab = Vocab::build(words);
    let mut text = EmbeddingTextEncoder::new(vocab, cfg.d, seed.wrapping_add(1));
    text.max_len = cfg.max_text_len;

    let mut params = Params::new();
    for (r, a) in corpus.records.iter().zip(areas) {
        params.insert(format!("{AREAS_PREFIX}{}", r.id), a?);
    }
    for (n, m) in visual.to_params().iter().chain(text.to_params().iter()) {
        params.insert(n, m.clone());
    }
    let meta = serde_json::json!({
        "config_hash": run.ws.config_hash(),
        "vocab": text.vocab.words(),
        "max_text_len": cfg.max_text_len,
    });
    run.write(FEATURES, &params.to_blob("features", &meta))?;
    run.write_jsonl(TEXT, &texts)?;
    run.write_json(
        "vocab.json",
        &serde_json::json!({ "config_hash": run.ws.config_hash(), "size": text.vocab.len(), "words": text.vocab.words() }),
    )?;
    log::info!("augment: {} memes, vocabulary of {}", texts.len(), text.vocab.len());
    Ok(())
}
