//! evaluate and heatmap.

use std::collections::BTreeMap;
use std::path::Path;

use memecap_core::align::attention_map;
use memecap_core::corpus::Split;
use memecap_core::decoder::DecodeConfig;
use memecap_core::heatmap::export_heatmap;
use memecap_core::metrics::{round2, rubric_scale, score_corpus, EvaluationReport, RubricScores};
use memecap_core::tokenize::{detokenize, Tokenizer, WhitespacePunct};
use serde::{Deserialize, Serialize};

use super::common::*;
use super::StageOptions;
use crate::config::Checkpoint;
use crate::workspace::{par_map, read_text, StageRun};
use crate::{PipelineError, Result, Stage};

/// One line of `captions.jsonl`, and of a user-supplied captions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub meme_id: String,
    pub caption: String,
}

/// One rating in a human-scores file; several per meme are averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanScoreLine {
    pub meme_id: String,
    #[serde(flatten)]
    pub scores: RubricScores,
}

fn selected(corpus: &Corpus, split: &str) -> Result<Vec<usize>> {
    match split {
        "all" => Ok((0..corpus.records.len()).collect()),
        s => {
            let split: Split = s.parse().map_err(|_| PipelineError::Config(format!("unknown split {s:?}")))?;
            Ok(corpus.split(split))
        }
    }
}

fn generated_captions(run: &mut StageRun, corpus: &Corpus, idx: &[usize]) -> Result<Vec<CaptionLine>> {
    let features = load_features(run)?;
    let align = load_align(run, Stage::Sft)?;
    let decoder = match run.ws.config.stage.evaluate.checkpoint {
        Checkpoint::Rl => load_decoder(run, Stage::Rl, POLICY)?,
        Checkpoint::Sft => load_decoder(run, Stage::Sft, DECODER)?,
    };
    let run = &*run;
    let lines = par_map(idx, run.ws.workers, |_, &i| -> Result<CaptionLine> {
        let cond = features.conditioning(i, run, &align)?;
        let ids = decoder.generate(&cond, &DecodeConfig::greedy())?;
        Ok(CaptionLine { meme_id: corpus.records[i].id.clone(), caption: detokenize(&features.vocab().decode(&ids)) })
    });
    lines.into_iter().collect()
}

fn human_means(path: &Path) -> Result<BTreeMap<String, [f64; 4]>> {
    let mut sums: BTreeMap<String, ([f64; 4], usize)> = BTreeMap::new();
    for line in read_jsonl::<HumanScoreLine>(path)? {
        let scaled = rubric_scale(&line.scores)?;
        let e = sums.entry(line.meme_id).or_insert(([0.0; 4], 0));
        for (a, b) in e.0.iter_mut().zip(scaled) {
            *a += b;
        }
        e.1 += 1;
    }
    Ok(sums.into_iter().map(|(k, (s, n))| (k, s.map(|v| v / n as f64))).collect())
}

/// Metric name → value for the `all` row of a report's summary line.
pub fn summary_metrics(summary_line: &serde_json::Value) -> Result<BTreeMap<String, f64>> {
    let rows = summary_line["summary"].as_array().ok_or_else(|| PipelineError::Validation("report has no summary".into()))?;
    let all = rows
        .iter()
        .find(|r| r["group"] == "all")
        .ok_or_else(|| PipelineError::Validation("report summary has no `all` row".into()))?;
    let mut out = BTreeMap::new();
    if let Some(h) = all["human"].as_array() {
        for (name, v) in ["Info", "Rele", "Crea", "Humo"].iter().zip(h) {
            out.insert(name.to_string(), v.as_f64().unwrap_or(f64::NAN));
        }
        if let Some(v) = all["h_average"].as_f64() {
            out.insert("HAverage".into(), v);
        }
    }
    if let Some(a) = all["auto"].as_array() {
        for (name, v) in ["BLEU", "ROUGE", "CIDEr", "METEOR"].iter().zip(a) {
            out.insert(name.to_string(), v.as_f64().unwrap_or(f64::NAN));
        }
    }
    for (name, key) in [("MAverage", "m_average"), ("Average", "average")] {
        if let Some(v) = all[key].as_f64() {
            out.insert(name.into(), v);
        }
    }
    Ok(out)
}

/// The trailing summary line of a `report.jsonl`.
pub fn read_summary_line(path: &Path) -> Result<serde_json::Value> {
    let text = read_text(path)?;
    let last = text
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| PipelineError::Validation(format!("{} is empty", path.display())))?;
    Ok(serde_json::from_str(last)?)
}

fn comparison(run: &mut StageRun, ours: &serde_json::Value, other: &Path, force: bool) -> Result<()> {
    let other_report = if other.is_dir() { other.join(REPORT) } else { other.to_path_buf() };
    run.external_input(&other_report)?;
    let theirs = read_summary_line(&other_report)?;
    let (a, b) = (ours["config_hash"].as_str().unwrap_or(""), theirs["config_hash"].as_str().unwrap_or(""));
    if a != b && !force {
        return Err(PipelineError::Validation(format!(
            "{} was produced under config {b}, this run under {a}; pass --force to compare anyway",
            other_report.display()
        )));
    }
    let (ma, mb) = (summary_metrics(ours)?, summary_metrics(&theirs)?);
    let mut csv = String::from("metric,this,other,delta\n");
    for (name, va) in &ma {
        if let Some(vb) = mb.get(name) {
            csv.push_str(&format!("{name},{:.2},{:.2},{:.2}\n", round2(*va), round2(*vb), round2(va - vb)));
        }
    }
    csv.push_str(&format!("config_hash,{a},{b},\n"));
    run.write("comparison.csv", csv.as_bytes())?;
    Ok(())
}

pub fn evaluate(run: &mut StageRun, opts: &StageOptions) -> Result<()> {
    let corpus = load_corpus(run)?;
    let cfg = run.ws.config.stage.evaluate.clone();
    let idx = selected(&corpus, &cfg.split)?;
    if idx.is_empty() {
        return Err(PipelineError::Validation(format!("the {} split is empty", cfg.split)));
    }
    let captions = match &cfg.captions {
        Some(path) => {
            run.external_input(path)?;
            let given: BTreeMap<String, String> =
                read_jsonl::<CaptionLine>(path)?.into_iter().map(|c| (c.meme_id, c.caption)).collect();
            idx.iter()
                .map(|&i| {
                    let id = &corpus.records[i].id;
                    let caption = given.get(id).cloned().unwrap_or_else(|| {
                        log::warn!("{id}: no caption in {}; scored as empty", path.display());
                        String::new()
                    });
                    CaptionLine { meme_id: id.clone(), caption }
                })
                .collect()
        }
        None => generated_captions(run, &corpus, &idx)?,
    };
    let ids: Vec<String> = idx.iter().map(|&i| corpus.records[i].id.clone()).collect();
    let groups: Vec<String> = idx.iter().map(|&i| corpus.records[i].structure.as_str().to_string()).collect();
    let cands: Vec<Vec<String>> = captions.iter().map(|c| WhitespacePunct.tokenize(&c.caption)).collect();
    let refs: Vec<Vec<String>> = idx.iter().map(|&i| corpus.records[i].caption_tokens.clone()).collect();
    let mut memes = score_corpus(&ids, &groups, &cands, &refs)?;
    if let Some(path) = &cfg.human_scores {
        run.external_input(path)?;
        let human = human_means(path)?;
        for m in memes.iter_mut() {
            m.human = human.get(&m.meme_id).copied();
        }
    }
    let report = EvaluationReport::new(memes)?;

    let mut jsonl = report.to_jsonl()?;
    jsonl.pop();
    let cut = jsonl.rfind('\n').map(|p| p + 1).unwrap_or(0);
    let mut tail: serde_json::Value = serde_json::from_str(&jsonl[cut..])?;
    tail["config_hash"] = run.ws.config_hash().into();
    jsonl.truncate(cut);
    jsonl.push_str(&serde_json::to_string(&tail)?);
    jsonl.push('\n');
    run.write(REPORT, jsonl.as_bytes())?;

    let hash = run.ws.config_hash().to_string();
    let csv: String = report
        .to_csv()
        .lines()
        .enumerate()
        .map(|(n, l)| if n == 0 { format!("{l},config_hash\n") } else { format!("{l},{hash}\n") })
        .collect();
    run.write("summary.csv", csv.as_bytes())?;
    run.write_jsonl(CAPTIONS, &captions)?;
    if let Some(all) = report.summary.last() {
        log::info!("evaluate: {} memes, MAverage {:.2}", all.count, all.m_average);
    }
    if let Some(other) = &opts.compare {
        comparison(run, &tail, other, opts.force)?;
    }
    Ok(())
}

pub fn heatmap(run: &mut StageRun) -> Result<()> {
    let captions: Vec<CaptionLine> = read_jsonl(&run.input(Stage::Evaluate, CAPTIONS)?)?;
    let corpus = load_corpus(run)?;
    let features = load_features(run)?;
    let align = load_align(run, Stage::Sft)?;
    let rois = super::corpus::load_rois(run)?;
    let cfg = run.ws.config.stage.heatmap.clone();
    let grid = run.ws.config.stage.augment.grid;
    let by_id: BTreeMap<&str, &memecap_core::corpus::MemeRecord> = corpus.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut written = 0;
    for c in captions.iter().filter(|c| !c.caption.trim().is_empty()).take(cfg.limit) {
        let record = by_id
            .get(c.meme_id.as_str())
            .ok_or_else(|| PipelineError::Validation(format!("caption for unknown meme {}", c.meme_id)))?;
        let tokens = WhitespacePunct.tokenize(&c.caption);
        let mut ids = features.vocab().encode(&tokens)?;
        ids.truncate(features.text.max_len);
        let att = attention_map(features.areas_of(&c.meme_id)?, &features.text.encode_ids(&ids)?, &align)?;
        let image = load_rgb(&corpus.image_path(record))?;
        let boxes = rois.get(&c.meme_id).map(Vec::as_slice).unwrap_or(&[]);
        for j in 0..cfg.tokens.min(ids.len()) {
            let path = run.path(&format!("{}_t{j}.png", c.meme_id));
            export_heatmap(&att, &image, boxes, grid, j, &path)?;
            run.record(&path)?;
            written += 1;
        }
    }
    log::info!("heatmap: {written} images");
    Ok(())
}
