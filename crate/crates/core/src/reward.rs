//! Caption preferences and the scalar reward model.
//!
//! Candidate captions for a meme get ranked twice: by people, and by how
//! closely each generated token's attention over the image areas follows the
//! reference caption's. The two rankings are fused by weighted Borda count and
//! every ordered pair of the fused ranking trains the reward model with a
//! logistic pairwise loss.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agreement::AGREEMENT_THRESHOLD;
use crate::autodiff::{Tape, Var};
use crate::decoder::{Conditioning, Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::{Bound, Params};
use crate::tensor::{log_sigmoid, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    /// Decoder token ids.
    pub tokens: Vec<usize>,
    /// Token-level attention of the caption over the meme's areas, `N × n`.
    pub attention: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub meme_id: String,
    pub candidates: Vec<Candidate>,
    /// Checkpoint that produced the captions.
    pub checkpoint: String,
}

impl CandidateSet {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::record(&self.meme_id, m));
        if self.candidates.len() < 2 {
            return fail(format!("{} candidates, need at least 2", self.candidates.len()));
        }
        let ids: BTreeSet<&str> = self.candidates.iter().map(|c| c.id.as_str()).collect();
        if ids.len() != self.candidates.len() {
            return fail("candidate ids repeat".into());
        }
        let captions: BTreeSet<&[usize]> = self.candidates.iter().map(|c| c.tokens.as_slice()).collect();
        if captions.len() != self.candidates.len() {
            return fail("candidate captions repeat".into());
        }
        if let Some(c) = self.candidates.iter().find(|c| c.tokens.is_empty()) {
            return fail(format!("candidate {} is empty", c.id));
        }
        Ok(())
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.candidates.iter().map(|c| c.id.as_str()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceSource {
    Human,
    Attention,
    Fused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub meme_id: String,
    /// Candidate ids from worst to best.
    pub ordering: Vec<String>,
    pub source: PreferenceSource,
    #[serde(default)]
    pub agreement: Option<f64>,
    #[serde(default)]
    pub annotator_ids: Vec<String>,
    #[serde(default)]
    pub timestamp: Option<String>,
}

impl PreferenceRecord {
    pub fn new(meme_id: impl Into<String>, ordering: Vec<String>, source: PreferenceSource) -> Self {
        PreferenceRecord { meme_id: meme_id.into(), ordering, source, agreement: None, annotator_ids: Vec::new(), timestamp: None }
    }

    pub fn validate(&self) -> Result<()> {
        let unique: BTreeSet<&String> = self.ordering.iter().collect();
        if self.ordering.len() < 2 || unique.len() != self.ordering.len() {
            return Err(Error::record(&self.meme_id, "ordering must list at least two distinct candidates"));
        }
        match (self.source, self.agreement) {
            (_, Some(a)) if !(-1.0..=1.0).contains(&a) => {
                Err(Error::record(&self.meme_id, format!("agreement {a} outside [-1, 1]")))
            }
            (PreferenceSource::Human, None) => Err(Error::record(&self.meme_id, "human ordering lacks an agreement score")),
            _ => Ok(()),
        }
    }

    /// The ordering is a permutation of exactly this candidate set.
    pub fn check_against(&self, set: &CandidateSet) -> Result<()> {
        self.validate()?;
        let mine: BTreeSet<&str> = self.ordering.iter().map(String::as_str).collect();
        if self.meme_id != set.meme_id || mine != set.ids() {
            return Err(Error::record(&self.meme_id, "ordering does not match the candidate set"));
        }
        Ok(())
    }

    /// Human orderings count only above the agreement threshold.
    pub fn usable(&self) -> bool {
        self.validate().is_ok()
            && (self.source != PreferenceSource::Human || self.agreement.is_some_and(|a| a > AGREEMENT_THRESHOLD))
    }
}

/// Base-2 Jensen–Shannon divergence, in `[0, 1]`.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).log2()).sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).clamp(0.0, 1.0)
}

/// Column `j` of a token-level map rescaled into a distribution over areas.
fn area_distribution(att: &Matrix, j: usize) -> Vec<f64> {
    let col = att.column(j);
    let s: f64 = col.iter().sum();
    if s > 0.0 {
        col.iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / col.len() as f64; col.len()]
    }
}

/// Where the reference caption looks: the mean over its tokens of each
/// token's distribution over areas.
pub fn area_prior(reference_attention: &Matrix) -> Result<Vec<f64>> {
    let (areas, tokens) = reference_attention.shape();
    if areas == 0 || tokens == 0 {
        return Err(Error::InvalidArgument("empty reference attention".into()));
    }
    let mut prior = vec![0.0; areas];
    for j in 0..tokens {
        for (p, v) in prior.iter_mut().zip(area_distribution(reference_attention, j)) {
            *p += v / tokens as f64;
        }
    }
    Ok(prior)
}

/// Mean over tokens of `1 − JSD(token's area distribution ‖ prior)`.
pub fn attention_alignment(att: &Matrix, prior: &[f64]) -> Result<f64> {
    if att.rows() != prior.len() {
        return Err(Error::Shape(format!("attention covers {} areas but the prior {}", att.rows(), prior.len())));
    }
    if att.cols() == 0 {
        return Err(Error::InvalidArgument("candidate has no tokens".into()));
    }
    Ok((0..att.cols()).map(|j| 1.0 - jsd(&area_distribution(att, j), prior)).sum::<f64>() / att.cols() as f64)
}

fn order_by_score(scores: Vec<(f64, String)>) -> Vec<String> {
    let mut scores = scores;
    scores.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    scores.into_iter().map(|(_, id)| id).collect()
}

/// Ranks candidates by attention alignment, worst first; equal scores fall
/// back to candidate id order.
pub fn attention_rank(set: &CandidateSet, prior: &[f64]) -> Result<PreferenceRecord> {
    set.validate()?;
    let scores = set
        .candidates
        .iter()
        .map(|c| Ok((attention_alignment(&c.attention, prior).map_err(|e| Error::record(&set.meme_id, e.to_string()))?, c.id.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreferenceRecord::new(set.meme_id.clone(), order_by_score(scores), PreferenceSource::Attention))
}

/// Worst gets 0 points, best `k − 1`.
pub fn borda_points(ordering: &[String]) -> BTreeMap<&str, f64> {
    ordering.iter().enumerate().map(|(i, id)| (id.as_str(), i as f64)).collect()
}

pub const DEFAULT_HUMAN_WEIGHT: f64 = 0.7;

pub fn fuse_rankings(human: &PreferenceRecord, attention: &PreferenceRecord, human_weight: f64) -> Result<PreferenceRecord> {
    if !(0.0..=1.0).contains(&human_weight) {
        return Err(Error::InvalidArgument(format!("human weight {human_weight} outside [0, 1]")));
    }
    human.validate()?;
    attention.validate()?;
    let h = borda_points(&human.ordering);
    let a = borda_points(&attention.ordering);
    if human.meme_id != attention.meme_id || !h.keys().eq(a.keys()) {
        return Err(Error::record(&human.meme_id, "human and attention rankings cover different candidates"));
    }
    let scores = h.iter().map(|(id, p)| (human_weight * p + (1.0 - human_weight) * a[id], id.to_string())).collect();
    Ok(PreferenceRecord {
        meme_id: human.meme_id.clone(),
        ordering: order_by_score(scores),
        source: PreferenceSource::Fused,
        agreement: human.agreement,
        annotator_ids: human.annotator_ids.clone(),
        timestamp: None,
    })
}

/// Every `(preferred, other)` pair implied by a worst-to-best ordering.
pub fn ranking_pairs<T: Clone>(ordering: &[T]) -> Vec<(T, T)> {
    let mut out = Vec::with_capacity(ordering.len() * ordering.len().saturating_sub(1) / 2);
    for hi in (0..ordering.len()).rev() {
        for lo in 0..hi {
            out.push((ordering[hi].clone(), ordering[lo].clone()));
        }
    }
    out
}

/// `mean −log σ(margin)`.
pub fn ranking_loss_from_margins(margins: &[f64]) -> Result<f64> {
    if margins.is_empty() {
        return Err(Error::InvalidArgument("no ranking pairs".into()));
    }
    if margins.iter().any(|m| !m.is_finite()) {
        return Err(Error::Training("non-finite reward margin".into()));
    }
    Ok(-margins.iter().map(|m| log_sigmoid(*m)).sum::<f64>() / margins.len() as f64)
}

pub const REWARD_W: &str = "reward.w";
pub const REWARD_B: &str = "reward.b";
pub const REWARD_BLOB_KIND: &str = "reward";

/// Decoder trunk with a linear scalar head, averaged over caption positions.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub trunk: Decoder,
    pub head: Params,
}

impl RewardModel {
    pub fn from_decoder(decoder: &Decoder, seed: u64) -> RewardModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = decoder.config.width;
        let mut head = Params::new();
        head.insert(REWARD_W, Matrix::randn(w, 1, 1.0 / (w as f64).sqrt(), &mut rng));
        head.insert(REWARD_B, Matrix::zeros(1, 1));
        RewardModel { trunk: decoder.clone(), head }
    }

    pub fn config(&self) -> DecoderConfig {
        self.trunk.config
    }

    /// All tensors under their own names.
    pub fn params(&self) -> Params {
        let mut p = self.trunk.params.clone();
        for (n, m) in self.head.iter() {
            p.insert(n, m.clone());
        }
        p
    }

    pub fn set_params(&mut self, p: &Params) {
        for (n, m) in self.trunk.params.iter_mut().chain(self.head.iter_mut()) {
            *m = p.get(n).clone();
        }
    }

    pub fn score_var<'t>(&self, tape: &'t Tape, b: &Bound<'t>, cond: &Conditioning, ids: &[usize]) -> Result<Var<'t>> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("cannot score an empty caption".into()));
        }
        let hidden = self.trunk.trunk(tape, b, cond, ids)?.slice_rows(1, ids.len() + 1);
        Ok(hidden.matmul(b.get(REWARD_W)).mean().add(b.get(REWARD_B)))
    }

    pub fn score(&self, cond: &Conditioning, ids: &[usize]) -> Result<f64> {
        let tape = Tape::new();
        let b = self.params().bind(&tape, false);
        let r = self.score_var(&tape, &b, cond, ids)?.item();
        if !r.is_finite() {
            return Err(Error::Training("reward model produced a non-finite score".into()));
        }
        Ok(r)
    }

    pub fn to_blob(&self, meta: serde_json::Value) -> Vec<u8> {
        let meta = serde_json::json!({ "decoder": self.trunk.config, "extra": meta });
        self.params().to_blob(REWARD_BLOB_KIND, &meta)
    }

    pub fn from_blob(bytes: &[u8]) -> Result<RewardModel> {
        let blob = Params::from_blob(bytes)?;
        if blob.kind != REWARD_BLOB_KIND {
            return Err(Error::Format(format!("expected a reward checkpoint, found {:?}", blob.kind)));
        }
        let config: DecoderConfig = serde_json::from_value(blob.meta["decoder"].clone())?;
        let trunk = Decoder::from_params(config, blob.params.subset("dec."))?;
        let head = blob.params.subset("reward.");
        for name in [REWARD_W, REWARD_B] {
            if !head.contains(name) {
                return Err(Error::Format(format!("reward checkpoint lacks {name}")));
            }
        }
        Ok(RewardModel { trunk, head })
    }
}

/// `L_r` over `(preferred, other)` caption pairs for one conditioning, with
/// gradients for every model tensor.
pub fn pairwise_ranking_loss(model: &RewardModel, cond: &Conditioning, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<(f64, Params)> {
    let items = [PairGroup { cond, pairs: pairs.to_vec() }];
    grouped_loss(model, &items, true)
}

/// Pairs sharing one conditioning.
#[derive(Debug, Clone)]
pub struct PairGroup<'a> {
    pub cond: &'a Conditioning,
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

/// Mean over groups of each group's mean pair loss. Each distinct caption is
/// scored once per group.
fn grouped_loss(model: &RewardModel, groups: &[PairGroup<'_>], with_grads: bool) -> Result<(f64, Params)> {
    if groups.is_empty() || groups.iter().any(|g| g.pairs.is_empty()) {
        return Err(Error::InvalidArgument("no ranking pairs".into()));
    }
    let tape = Tape::new();
    let b = model.params().bind(&tape, with_grads);
    let mut per_group = Vec::with_capacity(groups.len());
    for g in groups {
        let mut scores: BTreeMap<&[usize], Var<'_>> = BTreeMap::new();
        for (w, l) in &g.pairs {
            for y in [w, l] {
                if !scores.contains_key(y.as_slice()) {
                    scores.insert(y.as_slice(), model.score_var(&tape, &b, g.cond, y)?);
                }
            }
        }
        let terms: Vec<Var<'_>> =
            g.pairs.iter().map(|(w, l)| scores[w.as_slice()].sub(scores[l.as_slice()]).log_sigmoid()).collect();
        per_group.push(Var::vstack(&terms).mean().neg());
    }
    let loss = Var::vstack(&per_group).mean();
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Training("reward model produced a non-finite loss".into()));
    }
    let grads = if with_grads { b.grads(&tape.backward(loss)) } else { Params::new() };
    Ok((value, grads))
}

/// A meme's candidates with its conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardExample {
    pub set: CandidateSet,
    pub cond: Conditioning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrainConfig {
    pub steps: usize,
    /// Preference records per step.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub clip: Option<f64>,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        RewardTrainConfig { steps: 500, batch_size: 8, optimizer: OptimizerConfig::adam(3e-3), clip: Some(5.0), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLogRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
}

fn caption_pairs(record: &PreferenceRecord, set: &CandidateSet) -> Vec<(Vec<usize>, Vec<usize>)> {
    ranking_pairs(&record.ordering)
        .into_iter()
        .map(|(w, l)| (set.get(&w).unwrap().tokens.clone(), set.get(&l).unwrap().tokens.clone()))
        .collect()
}

/// Usable records joined with their candidate sets.
fn join<'a>(records: &[PreferenceRecord], examples: &'a [RewardExample]) -> Result<Vec<(&'a Conditioning, Vec<(Vec<usize>, Vec<usize>)>)>> {
    let by_id: BTreeMap<&str, &RewardExample> = examples.iter().map(|e| (e.set.meme_id.as_str(), e)).collect();
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.usable()) {
        let ex = by_id.get(r.meme_id.as_str()).ok_or_else(|| Error::record(&r.meme_id, "no candidate set for this ordering"))?;
        r.check_against(&ex.set)?;
        out.push((&ex.cond, caption_pairs(r, &ex.set)));
    }
    if out.is_empty() {
        return Err(Error::Training("no usable preferences".into()));
    }
    Ok(out)
}

/// Mean pairwise loss over the usable records.
pub fn evaluate_reward(model: &RewardModel, records: &[PreferenceRecord], examples: &[RewardExample]) -> Result<f64> {
    let data = join(records, examples)?;
    let groups: Vec<PairGroup<'_>> = data.iter().map(|(c, p)| PairGroup { cond: c, pairs: p.clone() }).collect();
    Ok(grouped_loss(model, &groups, false)?.0)
}

/// Fraction of ranking pairs the model orders correctly.
pub fn pair_accuracy(model: &RewardModel, records: &[PreferenceRecord], examples: &[RewardExample]) -> Result<f64> {
    let data = join(records, examples)?;
    let mut right = 0usize;
    let mut total = 0usize;
    for (cond, pairs) in &data {
        let mut cache: BTreeMap<&[usize], f64> = BTreeMap::new();
        for (w, l) in pairs {
            for y in [w, l] {
                if !cache.contains_key(y.as_slice()) {
                    cache.insert(y, model.score(cond, y)?);
                }
            }
            right += (cache[w.as_slice()] > cache[l.as_slice()]) as usize;
            total += 1;
        }
    }
    Ok(right as f64 / total as f64)
}

/// Trains on every pair of every usable record. Human orderings at or below
/// the agreement threshold are skipped. Log entries are per pass over the
/// records; the last one may be partial.
pub fn train_reward(
    model: &mut RewardModel,
    records: &[PreferenceRecord],
    examples: &[RewardExample],
    cfg: &RewardTrainConfig,
) -> Result<Vec<RewardLogRecord>> {
    let data = join(records, examples)?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.clip);
    let mut params = model.params();
    let mut log = Vec::new();
    let mut step = 0;
    let mut epoch = 0;
    while step < cfg.steps {
        epoch += 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            if step == cfg.steps {
                break;
            }
            let groups: Vec<PairGroup<'_>> = chunk.iter().map(|&i| PairGroup { cond: data[i].0, pairs: data[i].1.clone() }).collect();
            let (loss, grads) = grouped_loss(model, &groups, true)?;
            opt.step(&mut params, &grads);
            model.set_params(&params);
            sum += loss;
            count += 1;
            step += 1;
        }
        log.push(RewardLogRecord { epoch, steps: step, loss: sum / count as f64 });
    }
    Ok(log)
}

/// Append-only JSONL file of preference records.
#[derive(Debug, Clone)]
pub struct PreferenceStore {
    path: PathBuf,
}

impl PreferenceStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        PreferenceStore { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &PreferenceRecord) -> Result<()> {
        record.validate()?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        f.sync_data().map_err(|e| Error::io(&self.path, e))
    }

    /// Every record in file order; a missing file is empty.
    pub fn load(&self) -> Result<Vec<PreferenceRecord>> {
        let text = match std::fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&self.path, e)),
        };
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let r: PreferenceRecord = serde_json::from_str(l)
                    .map_err(|e| Error::Format(format!("{}:{}: {e}", self.path.display(), i + 1)))?;
                r.validate()?;
                Ok(r)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, FD_EPSILON, FD_TOLERANCE};
    use proptest::prelude::*;
    use rand::Rng;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn cand(id: &str, tokens: Vec<usize>, att: Matrix) -> Candidate {
        Candidate { id: id.into(), tokens, attention: att }
    }

    fn set_of(cands: Vec<Candidate>) -> CandidateSet {
        CandidateSet { meme_id: "m".into(), candidates: cands, checkpoint: "sft".into() }
    }

    #[test]
    fn jsd_bounds() {
        assert_eq!(jsd(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
        let a = jsd(&[0.1, 0.6, 0.3], &[0.5, 0.25, 0.25]);
        assert!((a - jsd(&[0.5, 0.25, 0.25], &[0.1, 0.6, 0.3])).abs() < 1e-15);
    }

    #[test]
    fn exact_prior_match_ranks_first() {
        let reference = Matrix::from_vec(3, 2, vec![0.6, 0.4, 0.2, 0.8, 0.5, 0.5]);
        let prior = area_prior(&reference).unwrap();
        let s = set_of(vec![
            cand("a", vec![2, 3], reference.clone()),
            cand("b", vec![2], Matrix::from_vec(3, 1, vec![1.0, 0.0, 0.0])),
            cand("c", vec![3], Matrix::from_vec(3, 1, vec![0.3, 0.3, 0.4])),
        ]);
        // the prior is the mean of the reference columns, so score "a" via a
        // candidate whose every column is the prior itself
        let mut exact = s.clone();
        exact.candidates[0].attention = Matrix::from_vec(3, 1, prior.clone());
        assert_eq!(attention_alignment(&exact.candidates[0].attention, &prior).unwrap(), 1.0);
        let r = attention_rank(&exact, &prior).unwrap();
        assert_eq!(r.ordering.last().unwrap(), "a");
        assert_eq!(r.source, PreferenceSource::Attention);
    }

    #[test]
    fn ties_follow_candidate_ids_and_input_order_is_irrelevant() {
        let att = Matrix::from_vec(2, 1, vec![0.7, 0.3]);
        let prior = [0.5, 0.5];
        let s = set_of(vec![cand("z", vec![4], att.clone()), cand("b", vec![5], att.clone()), cand("k", vec![6], att)]);
        assert_eq!(attention_rank(&s, &prior).unwrap().ordering, ids(&["b", "k", "z"]));
        let mut rev = s.clone();
        rev.candidates.reverse();
        assert_eq!(attention_rank(&rev, &prior).unwrap(), attention_rank(&s, &prior).unwrap());
        assert!(attention_rank(&s, &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn three_candidate_ordering_matches_direct_jsd() {
        let prior = [0.5, 0.3, 0.2];
        let maps = [
            ("x", Matrix::from_vec(3, 2, vec![0.9, 0.1, 0.05, 0.95, 0.05, 0.0])),
            ("y", Matrix::from_vec(3, 2, vec![0.5, 0.5, 0.3, 0.7, 0.2, 0.8])),
            ("w", Matrix::from_vec(3, 2, vec![0.1, 0.9, 0.8, 0.2, 0.1, 0.9])),
        ];
        let s = set_of(maps.iter().enumerate().map(|(i, (id, m))| cand(id, vec![2 + i], m.clone())).collect());
        let direct = |m: &Matrix| -> f64 {
            let mut total = 0.0;
            for j in 0..m.cols() {
                let col = m.column(j);
                let sum: f64 = col.iter().sum();
                let p: Vec<f64> = col.iter().map(|v| v / sum).collect();
                let mut d = 0.0;
                for i in 0..3 {
                    let mid = (p[i] + prior[i]) / 2.0;
                    if p[i] > 0.0 {
                        d += 0.5 * p[i] * (p[i] / mid).log2();
                    }
                    d += 0.5 * prior[i] * (prior[i] / mid).log2();
                }
                total += 1.0 - d;
            }
            total / m.cols() as f64
        };
        let mut expected: Vec<(f64, &str)> = maps.iter().map(|(id, m)| (direct(m), *id)).collect();
        expected.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let expected: Vec<String> = expected.iter().map(|(_, id)| id.to_string()).collect();
        assert_eq!(attention_rank(&s, &prior).unwrap().ordering, expected);
    }

    #[test]
    fn fusion() {
        let mut human = PreferenceRecord::new("m", ids(&["a", "b", "c"]), PreferenceSource::Human);
        human.agreement = Some(0.8);
        let att = PreferenceRecord::new("m", ids(&["c", "a", "b"]), PreferenceSource::Attention);
        assert_eq!(fuse_rankings(&human, &att, 1.0).unwrap().ordering, human.ordering);
        assert_eq!(fuse_rankings(&human, &att, 0.0).unwrap().ordering, att.ordering);
        // points at 0.5: a = (0+1)/2, b = (1+2)/2, c = (2+0)/2 → a 0.5 < c 1.0 < b 1.5
        let f = fuse_rankings(&human, &att, 0.5).unwrap();
        assert_eq!(f.ordering, ids(&["a", "c", "b"]));
        assert_eq!(f.source, PreferenceSource::Fused);
        let other = PreferenceRecord::new("m", ids(&["a", "b", "d"]), PreferenceSource::Attention);
        assert!(fuse_rankings(&human, &other, 0.5).is_err());
        assert!(fuse_rankings(&human, &att, 1.5).is_err());
    }

    #[test]
    fn pairs_cover_each_unordered_pair_once() {
        assert_eq!(ranking_pairs(&[1, 2]), vec![(2, 1)]);
        for k in 2..8usize {
            let ordering: Vec<usize> = (0..k).collect();
            let pairs = ranking_pairs(&ordering);
            assert_eq!(pairs.len(), k * (k - 1) / 2);
            assert!(pairs.iter().all(|(w, l)| w > l));
            let set: BTreeSet<(usize, usize)> = pairs.iter().map(|&(w, l)| (l, w)).collect();
            let brute: BTreeSet<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
            assert_eq!(set, brute);
        }
    }

    #[test]
    fn loss_fixtures() {
        assert!((ranking_loss_from_margins(&[0.0; 6]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((ranking_loss_from_margins(&[1.0, 1.0, 1.0]).unwrap() - 0.313261687518223).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for m in [0.5, 1.0, 2.0, 5.0, 10.0, 30.0] {
            let l = ranking_loss_from_margins(&[m]).unwrap();
            assert!(l < last && l > 0.0);
            last = l;
        }
        assert!(last < 1e-12);
        assert!(ranking_loss_from_margins(&[]).is_err());
        assert!(ranking_loss_from_margins(&[f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn loss_invariances(margins in proptest::collection::vec(-5.0f64..5.0, 1..10), shift in -50.0f64..50.0) {
            let once = ranking_loss_from_margins(&margins).unwrap();
            let twice: Vec<f64> = margins.iter().chain(&margins).copied().collect();
            prop_assert!((ranking_loss_from_margins(&twice).unwrap() - once).abs() < 1e-12);
            // the loss sees only score differences
            let scores: Vec<(f64, f64)> = margins.iter().map(|m| (shift + m, shift)).collect();
            let shifted: Vec<f64> = scores.iter().map(|(w, l)| w - l).collect();
            prop_assert!((ranking_loss_from_margins(&shifted).unwrap() - once).abs() < 1e-9);
        }
    }

    fn tiny_model(seed: u64) -> RewardModel {
        let cfg = DecoderConfig { vocab_size: 12, width: 6, layers: 1, hidden: 8, max_len: 6, cond_width: 3 };
        RewardModel::from_decoder(&Decoder::new(cfg, seed).unwrap(), seed + 1)
    }

    fn cond(seed: u64) -> Conditioning {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Conditioning { image: Matrix::randn(1, 3, 1.0, &mut rng), coh_ids: vec![] }
    }

    #[test]
    fn model_loss_matches_margins_and_bias_shift() {
        let mut m = tiny_model(1);
        let c = cond(2);
        let pairs = vec![(vec![2, 3], vec![4]), (vec![5, 6, 7], vec![2, 3]), (vec![5, 6, 7], vec![4])];
        let (loss, _) = pairwise_ranking_loss(&m, &c, &pairs).unwrap();
        let margins: Vec<f64> = pairs.iter().map(|(w, l)| m.score(&c, w).unwrap() - m.score(&c, l).unwrap()).collect();
        assert!((loss - ranking_loss_from_margins(&margins).unwrap()).abs() < 1e-12);
        m.head.get_mut(REWARD_B)[(0, 0)] += 17.0;
        assert!((pairwise_ranking_loss(&m, &c, &pairs).unwrap().0 - loss).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..4 {
            let m = tiny_model(seed);
            let c = cond(seed + 7);
            let pairs = vec![(vec![2, 9], vec![4, 4, 5]), (vec![10], vec![2, 9])];
            let (_, grads) = pairwise_ranking_loss(&m, &c, &pairs).unwrap();
            let report = check_params(&m.params(), &grads, FD_EPSILON, 5, seed, |p| {
                let mut mm = m.clone();
                mm.set_params(p);
                pairwise_ranking_loss(&mm, &c, &pairs).unwrap().0
            });
            assert!(report.passes(FD_TOLERANCE), "seed {seed}: {report:?}");
        }
    }

    fn example(meme: &str, captions: &[Vec<usize>], seed: u64) -> RewardExample {
        let cands = captions
            .iter()
            .enumerate()
            .map(|(i, t)| cand(&format!("c{i}"), t.clone(), Matrix::filled(2, t.len(), 0.5)))
            .collect();
        RewardExample { set: CandidateSet { meme_id: meme.into(), candidates: cands, checkpoint: "s".into() }, cond: cond(seed) }
    }

    #[test]
    fn overfits_a_single_pair() {
        let mut m = tiny_model(3);
        let ex = example("m", &[vec![2, 3, 4], vec![5, 6]], 1);
        let rec = PreferenceRecord::new("m", ids(&["c1", "c0"]), PreferenceSource::Fused);
        let cfg = RewardTrainConfig { steps: 200, ..RewardTrainConfig::default() };
        let cfg = RewardTrainConfig { optimizer: OptimizerConfig::adam(0.01), ..cfg };
        train_reward(&mut m, std::slice::from_ref(&rec), std::slice::from_ref(&ex), &cfg).unwrap();
        assert!(evaluate_reward(&m, &[rec], &[ex]).unwrap() < 0.1);
    }

    #[test]
    fn filters_low_agreement_and_learns_planted_preferences() {
        // quality is a fixed per-token value summed over four tokens
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let value: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut make = |n: usize, prefix: &str| -> (Vec<RewardExample>, Vec<PreferenceRecord>) {
            let mut exs = Vec::new();
            let mut recs = Vec::new();
            for i in 0..n {
                let caps: Vec<Vec<usize>> = (0..4).map(|_| (0..4).map(|_| rng.gen_range(2..12)).collect()).collect();
                let mut caps = caps;
                caps.sort();
                caps.dedup();
                if caps.len() < 2 {
                    continue;
                }
                let ex = example(&format!("{prefix}{i}"), &caps, i as u64);
                let scores = ex.set.candidates.iter().map(|c| (c.tokens.iter().map(|&t| value[t]).sum(), c.id.clone())).collect();
                recs.push(PreferenceRecord::new(ex.set.meme_id.clone(), order_by_score(scores), PreferenceSource::Fused));
                exs.push(ex);
            }
            (exs, recs)
        };
        let (train, train_recs) = make(150, "t");
        let (held, held_recs) = make(20, "h");
        let mut m = tiny_model(9);
        let cfg = RewardTrainConfig { steps: 500, optimizer: OptimizerConfig::adam(0.01), ..RewardTrainConfig::default() };
        let log = train_reward(&mut m, &train_recs, &train, &cfg).unwrap();
        assert!(log.last().unwrap().loss < log[0].loss);
        let acc = pair_accuracy(&m, &held_recs, &held).unwrap();
        assert!(acc >= 0.95, "held-out pair accuracy {acc}");

        let mut human = train_recs[0].clone();
        human.source = PreferenceSource::Human;
        human.agreement = Some(0.7);
        let err = train_reward(&mut m.clone(), &[human.clone()], &train, &cfg).unwrap_err();
        assert!(err.to_string().contains("no usable preferences"));
        human.agreement = Some(0.71);
        assert!(human.usable());
    }

    #[test]
    fn training_is_bit_identical_across_runs() {
        let ex = example("m", &[vec![2, 3], vec![4, 5], vec![6]], 0);
        let rec = PreferenceRecord::new("m", ids(&["c2", "c0", "c1"]), PreferenceSource::Fused);
        let cfg = RewardTrainConfig { steps: 10, ..RewardTrainConfig::default() };
        let run = || {
            let mut m = tiny_model(4);
            train_reward(&mut m, std::slice::from_ref(&rec), std::slice::from_ref(&ex), &cfg).unwrap();
            m.to_blob(serde_json::json!({}))
        };
        let a = run();
        assert_eq!(a, run());
        let back = RewardModel::from_blob(&a).unwrap();
        assert_eq!(back.to_blob(serde_json::json!({})), a);
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = PreferenceStore::new(dir.path().join("prefs.jsonl"));
        assert!(store.load().unwrap().is_empty());
        let mut r = PreferenceRecord::new("m", ids(&["b", "a"]), PreferenceSource::Human);
        r.agreement = Some(0.9);
        r.annotator_ids = ids(&["x", "y", "z"]);
        r.timestamp = Some("2026-01-01T00:00:00Z".into());
        store.append(&r).unwrap();
        store.append(&PreferenceRecord::new("n", ids(&["a", "b"]), PreferenceSource::Fused)).unwrap();
        let back = store.load().unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], r);
        let line = std::fs::read_to_string(store.path()).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        for key in ["meme_id", "ordering", "source", "agreement", "annotator_ids", "timestamp"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(store.append(&PreferenceRecord::new("n", ids(&["a", "a"]), PreferenceSource::Fused)).is_err());
    }
}
