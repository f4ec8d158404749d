//! align, sft, candidates, train-reward and rl.

use std::collections::{BTreeMap, BTreeSet};

use memecap_core::align::{self, attention_map, train_align, AlignParams, AlignTrainConfig, MemeFeatures};
use memecap_core::corpus::Split;
use memecap_core::decoder::{Conditioning, Decoder, DecoderConfig};
use memecap_core::optim::OptimizerConfig;
use memecap_core::reward::{
    area_prior, attention_rank, fuse_rankings, pair_accuracy, train_reward as fit_reward, Candidate, CandidateSet,
    PreferenceRecord, RewardExample, RewardModel, RewardTrainConfig,
};
use memecap_core::rl::{greedy_disagreement, rl_train, PolicyPair, RlObjectiveConfig, RlTrainConfig, RlWeights};
use memecap_core::sft::{train_sft, SftExample, SftTrainConfig, SftWeights, SFT_BLOB_KIND};
use memecap_core::tokenize::detokenize;
use memecap_annotate::{AnnotationSet, CandidateText};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::common::*;
use crate::workspace::{par_map, read_text, StageRun};
use crate::{PipelineError, Result, Stage};

fn positive_or_none(v: f64) -> Option<f64> {
    (v > 0.0).then_some(v)
}

pub fn align(run: &mut StageRun) -> Result<()> {
    let corpus = load_corpus(run)?;
    let features = load_features(run)?;
    let cfg = run.ws.config.stage.align.clone();
    let seed = run.ws.seed_for(Stage::Align);
    let max_len = run.ws.config.stage.sft.max_len;
    let mut memes = Vec::new();
    for i in corpus.split(Split::Train) {
        let ids = features.reference_ids(i, max_len)?;
        memes.push(MemeFeatures { areas: features.areas_of(&features.texts[i].id)?.clone(), tokens: features.text.encode_ids(&ids)? });
    }
    let d = features.text.table.cols();
    let mut params = AlignParams::new(d, cfg.d_k, cfg.tau, seed)?;
    let losses = train_align(
        &memes,
        &mut params,
        &AlignTrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            optimizer: OptimizerConfig::adam(cfg.lr),
            clip: positive_or_none(cfg.clip),
            mode: cfg.mode,
            seed: seed.wrapping_add(1),
        },
    )?;
    let log: Vec<_> = losses.iter().enumerate().map(|(e, l)| serde_json::json!({ "epoch": e, "loss": l })).collect();
    run.write(ALIGN, &align_blob(&params, run.meta()))?;
    run.write_jsonl("log.jsonl", &log)?;
    Ok(())
}

/// Training examples for the decoder: every training meme, plus one more per
/// paraphrased caption when enabled.
fn sft_examples(run: &StageRun, corpus: &Corpus, features: &Features, align: &AlignParams) -> Result<Vec<SftExample>> {
    let sft = &run.ws.config.stage.sft;
    let mut out = Vec::new();
    for i in corpus.split(Split::Train) {
        let t = &features.texts[i];
        let areas = features.areas_of(&t.id)?;
        let coh = features.conditioning_ids(i, run)?;
        out.push(SftExample::new(t.id.clone(), areas.clone(), features.reference_ids(i, sft.max_len)?, coh.clone(), &features.text, align)?);
        if let (true, Some(p)) = (sft.paraphrases, &t.paraphrase) {
            let mut ids = features.vocab().encode(p)?;
            ids.truncate(sft.max_len);
            out.push(SftExample::new(format!("{}~p", t.id), areas.clone(), ids, coh, &features.text, align)?);
        }
    }
    Ok(out)
}

pub fn sft(run: &mut StageRun) -> Result<()> {
    let corpus = load_corpus(run)?;
    let features = load_features(run)?;
    let mut align = load_align(run, Stage::Align)?;
    let cfg = run.ws.config.stage.sft.clone();
    let seed = run.ws.seed_for(Stage::Sft);
    let mut examples = sft_examples(run, &corpus, &features, &align)?;
    let dec_cfg = DecoderConfig {
        vocab_size: features.vocab().len(),
        width: cfg.width,
        layers: cfg.layers,
        hidden: cfg.hidden,
        max_len: cfg.max_len,
        cond_width: align.params.get(align::W_M).rows(),
    };
    let mut decoder = Decoder::new(dec_cfg, seed)?;
    let train_cfg = SftTrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: OptimizerConfig::momentum(cfg.lr, cfg.momentum),
        clip: positive_or_none(cfg.clip),
        seed: seed.wrapping_add(1),
        weights: SftWeights { ori: cfg.lambda_ori, g: cfg.lambda_g, t: cfg.lambda_t, trainable: cfg.trainable_weights },
        train_align: cfg.train_align,
    };
    let dir = run.dir.clone();
    let outcome = train_sft(&mut examples, &mut decoder, &mut align, &features.text, &train_cfg, Some(&dir))?;
    let mut meta = run.meta();
    meta["weights"] = serde_json::to_value(outcome.weights)?;
    meta["examples"] = examples.len().into();
    run.write(DECODER, &decoder.to_blob(SFT_BLOB_KIND, meta.clone()))?;
    run.write(ALIGN, &align_blob(&align, meta))?;
    if let Some(last) = outcome.log.last() {
        log::info!("sft: final L_SFT {:.4} over {} examples", last.l_sft, examples.len());
    }
    run.record_all()?;
    Ok(())
}

/// One line of `attention.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRanking {
    pub meme_id: String,
    /// Area prior from the reference caption's attention.
    pub prior: Vec<f64>,
    pub record: PreferenceRecord,
}

/// Up to `k` distinct non-empty captions sampled from `decoder`.
pub fn distinct_samples(decoder: &Decoder, cond: &Conditioning, k: usize, temperature: f64, attempts: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for _ in 0..attempts.max(k) {
        let ids = decoder.sample_with(cond, temperature, &mut rng)?;
        if !ids.is_empty() && seen.insert(ids.clone()) {
            out.push(ids);
            if out.len() == k {
                break;
            }
        }
    }
    Ok(out)
}

pub fn candidates(run: &mut StageRun) -> Result<()> {
    let corpus = load_corpus(run)?;
    let features = load_features(run)?;
    let align = load_align(run, Stage::Sft)?;
    let decoder = load_decoder(run, Stage::Sft, DECODER)?;
    let cfg = run.ws.config.stage.candidates.clone();
    let max_len = run.ws.config.stage.sft.max_len;
    let seed = run.ws.seed_for(Stage::Candidates);
    let checkpoint = crate::workspace::file_hash(&run.ws.dir(Stage::Sft).join(DECODER))?;
    let train = corpus.split(Split::Train);
    let built = par_map(&train, run.ws.workers, |n, &i| -> Result<Option<(CandidateSet, AttentionRanking)>> {
        let id = &features.texts[i].id;
        let areas = features.areas_of(id)?;
        let cond = features.conditioning(i, run, &align)?;
        let captions = distinct_samples(&decoder, &cond, cfg.k, cfg.temperature, cfg.max_attempts, item_seed(seed, n))?;
        if captions.len() < 2 {
            log::warn!("{id}: only {} distinct caption(s) after {} draws; skipped", captions.len(), cfg.max_attempts);
            return Ok(None);
        }
        if captions.len() < cfg.k {
            log::warn!("{id}: {} of {} distinct captions", captions.len(), cfg.k);
        }
        let mut cands = Vec::with_capacity(captions.len());
        for (c, tokens) in captions.into_iter().enumerate() {
            let att = attention_map(areas, &features.text.encode_ids(&tokens)?, &align)?;
            cands.push(Candidate { id: format!("c{c}"), tokens, attention: att.token_level });
        }
        let set = CandidateSet { meme_id: id.clone(), candidates: cands, checkpoint: checkpoint.clone() };
        let reference = attention_map(areas, &features.text.encode_ids(&features.reference_ids(i, max_len)?)?, &align)?;
        let prior = area_prior(&reference.token_level)?;
        let record = attention_rank(&set, &prior)?;
        Ok(Some((set, AttentionRanking { meme_id: id.clone(), prior, record })))
    });
    let mut sets = Vec::new();
    let mut rankings = Vec::new();
    for b in built {
        if let Some((s, r)) = b? {
            sets.push(s);
            rankings.push(r);
        }
    }
    if sets.is_empty() {
        return Err(PipelineError::Validation("no meme produced two distinct candidate captions".into()));
    }
    let by_id: BTreeMap<&str, &memecap_core::corpus::MemeRecord> = corpus.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let annotation: Vec<AnnotationSet> = sets
        .iter()
        .map(|s| {
            let image = by_id[s.meme_id.as_str()].image_location(&corpus.dir);
            let image = image.strip_prefix(run.ws.root()).map(|p| p.to_path_buf()).unwrap_or(image);
            AnnotationSet {
                meme_id: s.meme_id.clone(),
                image,
                candidates: s
                    .candidates
                    .iter()
                    .map(|c| CandidateText { id: c.id.clone(), caption: detokenize(&features.vocab().decode(&c.tokens)) })
                    .collect(),
            }
        })
        .collect();
    run.write_json(SETS, &sets)?;
    run.write_jsonl(ATTENTION, &rankings)?;
    run.write_json(ANNOTATION_SETS, &annotation)?;
    log::info!("candidates: {} sets", sets.len());
    Ok(())
}

pub fn load_sets(run: &mut StageRun) -> Result<Vec<CandidateSet>> {
    let path = run.input(Stage::Candidates, SETS)?;
    Ok(serde_json::from_str(&read_text(&path)?)?)
}

/// Human orderings fused with the attention ranking where a usable one
/// exists; the attention ranking alone elsewhere.
pub fn merge_preferences(attention: &[AttentionRanking], human: &[PreferenceRecord], human_weight: f64) -> Result<Vec<PreferenceRecord>> {
    let human: BTreeMap<&str, &PreferenceRecord> = human.iter().filter(|h| h.usable()).map(|h| (h.meme_id.as_str(), h)).collect();
    attention
        .iter()
        .map(|a| match human.get(a.meme_id.as_str()) {
            Some(h) => Ok(fuse_rankings(h, &a.record, human_weight)?),
            None => Ok(a.record.clone()),
        })
        .collect()
}

pub fn train_reward(run: &mut StageRun) -> Result<()> {
    let features = load_features(run)?;
    let align = load_align(run, Stage::Sft)?;
    let sft = load_decoder(run, Stage::Sft, DECODER)?;
    let sets = load_sets(run)?;
    let attention: Vec<AttentionRanking> = read_jsonl(&run.input(Stage::Candidates, ATTENTION)?)?;
    let human: Vec<PreferenceRecord> = match run.optional_input(Stage::AnnotateServe, HUMAN_PREFERENCES)? {
        Some(p) => read_jsonl(&p)?,
        None => Vec::new(),
    };
    let cfg = run.ws.config.stage.train_reward.clone();
    let seed = run.ws.seed_for(Stage::TrainReward);
    let records = merge_preferences(&attention, &human, cfg.human_weight)?;
    let index: BTreeMap<&str, usize> = features.texts.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
    let mut examples = Vec::with_capacity(sets.len());
    for set in sets {
        let i = *index
            .get(set.meme_id.as_str())
            .ok_or_else(|| PipelineError::Validation(format!("candidate set for unknown meme {}", set.meme_id)))?;
        examples.push(RewardExample { cond: features.conditioning(i, run, &align)?, set });
    }
    let mut model = RewardModel::from_decoder(&sft, seed);
    let train_cfg = RewardTrainConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        optimizer: OptimizerConfig::adam(cfg.lr),
        clip: positive_or_none(cfg.clip),
        seed: seed.wrapping_add(1),
    };
    let log = fit_reward(&mut model, &records, &examples, &train_cfg)?;
    let accuracy = pair_accuracy(&model, &records, &examples)?;
    let fused = records.iter().filter(|r| r.source == memecap_core::reward::PreferenceSource::Fused).count();
    run.write(REWARD, &model.to_blob(run.meta()))?;
    run.write_jsonl(HUMAN_PREFERENCES, &records)?;
    run.write_jsonl("log.jsonl", &log)?;
    run.write_json(
        "metrics.json",
        &serde_json::json!({
            "config_hash": run.ws.config_hash(),
            "records": records.len(),
            "fused": fused,
            "attention_only": records.len() - fused,
            "pair_accuracy": accuracy,
            "final_loss": log.last().map(|l| l.loss),
        }),
    )?;
    log::info!("train-reward: pair accuracy {accuracy:.3} over {} records", records.len());
    Ok(())
}

pub fn rl(run: &mut StageRun) -> Result<()> {
    let reward_path = run.input(Stage::TrainReward, REWARD)?;
    let corpus = load_corpus(run)?;
    let features = load_features(run)?;
    let align = load_align(run, Stage::Sft)?;
    let sft = load_decoder(run, Stage::Sft, DECODER)?;
    let reward = RewardModel::from_blob(&crate::workspace::read_bytes(&reward_path)?)?;
    let cfg = run.ws.config.stage.rl.clone();
    let seed = run.ws.seed_for(Stage::Rl);
    let conds = corpus
        .split(Split::Train)
        .into_iter()
        .map(|i| features.conditioning(i, run, &align))
        .collect::<Result<Vec<_>>>()?;
    let mut pair = PolicyPair::new(&sft);
    let train_cfg = RlTrainConfig {
        steps: cfg.steps,
        memes_per_step: cfg.memes_per_step,
        samples_per_meme: cfg.samples_per_meme,
        objective: RlObjectiveConfig {
            weights: RlWeights { w1: cfg.w1, w2: cfg.w2 },
            paper_literal_sign: cfg.paper_literal_sign,
            log_prob_floor: positive_or_none(cfg.log_prob_floor),
        },
        optimizer: OptimizerConfig::adam(cfg.lr),
        clip: positive_or_none(cfg.clip),
        kl_ceiling: positive_or_none(cfg.kl_ceiling),
        seed,
    };
    let log = rl_train(&mut pair, &conds, &reward, &train_cfg)?;
    let disagreement = greedy_disagreement(&pair.policy, pair.reference(), &conds)?;
    let mut meta = run.meta();
    meta["reference_checksum"] = pair.reference_checksum().into();
    run.write(POLICY, &pair.policy.to_blob("policy", meta))?;
    run.write_jsonl("log.jsonl", &log)?;
    run.write_json(
        "summary.json",
        &serde_json::json!({
            "config_hash": run.ws.config_hash(),
            "steps": log.len(),
            "greedy_disagreement": disagreement,
            "final": log.last(),
        }),
    )?;
    log::info!("rl: greedy captions differ from SFT on {:.1}% of training memes", 100.0 * disagreement);
    Ok(())
}
