//! Reward-driven refinement of the fine-tuned decoder.
//!
//! The policy starts as a copy of the SFT decoder, which stays frozen as the
//! reference. Training ascends
//!
//! `J = w1 · mean r(x, y) − w2 · mean [log π(y|x) − log π_ref(y|x)]`
//!
//! over captions sampled from the policy, using the score-function gradient
//! with the batch mean of the per-sample advantage as baseline.
//!
//! For the gradient the KL term is Rao-Blackwellized: along each sampled
//! prefix the next-token KL is summed in closed form, and that sum enters both
//! the advantage and a pathwise term. The expectation is unchanged, but the
//! penalty keeps a gradient when every sample for a meme is the same caption,
//! where the plain estimator's advantage minus baseline is zero.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::decoder::{Conditioning, Decoder};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::Params;
use crate::reward::RewardModel;

pub const DEFAULT_LOG_PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for RlWeights {
    fn default() -> Self {
        RlWeights { w1: 0.4, w2: 0.6 }
    }
}

impl RlWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.w1) || !ok(self.w2) || (self.w1 == 0.0 && self.w2 == 0.0) {
            return Err(Error::InvalidArgument(format!("RL weights {self:?} must be non-negative and not both zero")));
        }
        Ok(())
    }
}

/// Scores a caption for a meme.
pub trait RewardFn {
    fn reward(&self, cond: &Conditioning, ids: &[usize]) -> Result<f64>;
}

impl RewardFn for RewardModel {
    fn reward(&self, cond: &Conditioning, ids: &[usize]) -> Result<f64> {
        self.score(cond, ids)
    }
}

impl<F: Fn(&Conditioning, &[usize]) -> f64> RewardFn for F {
    fn reward(&self, cond: &Conditioning, ids: &[usize]) -> Result<f64> {
        Ok(self(cond, ids))
    }
}

/// Trainable policy and its frozen reference.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPair {
    pub policy: Decoder,
    reference: Decoder,
    reference_checksum: String,
}

impl PolicyPair {
    pub fn new(sft: &Decoder) -> Self {
        PolicyPair { policy: sft.clone(), reference: sft.clone(), reference_checksum: sft.params.checksum() }
    }

    pub fn with_policy(policy: Decoder, reference: &Decoder) -> Result<Self> {
        if policy.config != reference.config {
            return Err(Error::InvalidArgument("policy and reference decoders differ in configuration".into()));
        }
        Ok(PolicyPair { policy, reference: reference.clone(), reference_checksum: reference.params.checksum() })
    }

    pub fn reference(&self) -> &Decoder {
        &self.reference
    }

    pub fn reference_checksum(&self) -> &str {
        &self.reference_checksum
    }

    /// Errors if the reference no longer matches its recorded checksum.
    pub fn verify_reference(&self) -> Result<()> {
        if self.reference.params.checksum() != self.reference_checksum {
            return Err(Error::Training("reference decoder changed during RL".into()));
        }
        Ok(())
    }
}

fn floored_log_prob(lps: &[f64], floor: Option<f64>, who: &str) -> Result<f64> {
    match floor {
        Some(f) => {
            let lf = f.ln();
            Ok(lps.iter().map(|l| l.max(lf)).sum())
        }
        None => {
            // anything below the smallest normal probability counts as zero
            if lps.iter().any(|l| !l.is_finite() || *l < f64::MIN_POSITIVE.ln()) {
                return Err(Error::Training(format!("{who} gives a sampled token zero probability")));
            }
            Ok(lps.iter().sum())
        }
    }
}

/// `log π(y|x) − log π_ref(y|x)` with each token probability floored at
/// `floor` before the log; without a floor a zero-probability token is an
/// error.
pub fn kl_to_sft(ids: &[usize], cond: &Conditioning, pair: &PolicyPair, floor: Option<f64>) -> Result<f64> {
    let p = floored_log_prob(&pair.policy.token_log_probs(cond, ids)?, floor, "policy")?;
    let q = floored_log_prob(&pair.reference.token_log_probs(cond, ids)?, floor, "reference")?;
    Ok(p - q)
}

/// `log π(y|x)` and `Σ_t KL(π(·|y_<t, x) ‖ π_ref(·|y_<t, x))` along the
/// caption and its closing `<eos>`, both from one policy pass. Reference
/// probabilities are floored like [`kl_to_sft`].
pub fn log_prob_and_path_kl<'t>(
    tape: &'t Tape,
    b: &crate::params::Bound<'t>,
    ids: &[usize],
    cond: &Conditioning,
    pair: &PolicyPair,
    floor: Option<f64>,
) -> Result<(Var<'t>, Var<'t>)> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty caption".into()));
    }
    let targets = pair.policy.targets(ids);
    let rows = targets.len();
    let logp = pair.policy.logits(tape, b, cond, ids)?.slice_rows(0, rows).log_softmax_rows();
    let mut logq = pair.reference.logits_cached(cond, ids)?;
    for r in 0..rows {
        let lse = crate::tensor::log_sum_exp(logq.row(r));
        for v in logq.row_mut(r) {
            *v -= lse;
            if let Some(f) = floor {
                *v = v.max(f.ln());
            }
        }
    }
    let logq = tape.constant(logq.slice_rows(0, rows));
    Ok((logp.pick_per_row(&targets).sum(), logp.exp().mul(logp.sub(logq)).sum()))
}

/// A caption sampled for meme `meme`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RlSample {
    pub meme: usize,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlObjectiveConfig {
    pub weights: RlWeights,
    /// Ascend `w1·r + w2·(log π − log π_ref)`, the printed sign of the KL
    /// term taken literally, instead of penalizing divergence.
    pub paper_literal_sign: bool,
    pub log_prob_floor: Option<f64>,
}

impl Default for RlObjectiveConfig {
    fn default() -> Self {
        RlObjectiveConfig { weights: RlWeights::default(), paper_literal_sign: false, log_prob_floor: Some(DEFAULT_LOG_PROB_FLOOR) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlObjective {
    pub j: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    /// Score-function estimate of `∇J` over the policy tensors.
    pub grad: Params,
}

/// `J` on a batch of policy samples and its gradient estimate. Repeated
/// samples are scored once and weighted by their count, which leaves the
/// estimator unchanged.
pub fn rl_objective(
    samples: &[RlSample],
    conds: &[Conditioning],
    reward: &dyn RewardFn,
    pair: &PolicyPair,
    cfg: &RlObjectiveConfig,
) -> Result<RlObjective> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty RL batch".into()));
    }
    cfg.weights.validate()?;
    let mut counts: BTreeMap<&RlSample, usize> = BTreeMap::new();
    for s in samples {
        if s.meme >= conds.len() {
            return Err(Error::InvalidArgument(format!("sample refers to meme {} of {}", s.meme, conds.len())));
        }
        *counts.entry(s).or_default() += 1;
    }
    let n = samples.len() as f64;
    let RlWeights { w1, w2 } = cfg.weights;
    let kl_sign = if cfg.paper_literal_sign { 1.0 } else { -1.0 };
    let tape = Tape::new();
    let b = pair.policy.params.bind(&tape, true);
    let mut scored = Vec::with_capacity(counts.len());
    let (mut sum_r, mut sum_k) = (0.0, 0.0);
    for (s, &c) in &counts {
        let cond = &conds[s.meme];
        let r = reward.reward(cond, &s.tokens)?;
        if !r.is_finite() {
            return Err(Error::Training("non-finite reward".into()));
        }
        let k = kl_to_sft(&s.tokens, cond, pair, cfg.log_prob_floor)?;
        sum_r += c as f64 * r;
        sum_k += c as f64 * k;
        let (lp, path) = log_prob_and_path_kl(&tape, &b, &s.tokens, cond, pair, cfg.log_prob_floor)?;
        scored.push((c as f64, w1 * r + kl_sign * w2 * path.item(), lp, path));
    }
    let mean_reward = sum_r / n;
    let mean_kl = sum_k / n;
    let j = w1 * mean_reward + kl_sign * w2 * mean_kl;
    let baseline = scored.iter().map(|(c, a, _, _)| c * a).sum::<f64>() / n;

    let mut terms: Vec<Var<'_>> = Vec::new();
    for (c, a, lp, path) in &scored {
        let coef = c * (a - baseline) / n;
        if coef != 0.0 {
            terms.push(lp.scale(coef));
        }
        if w2 != 0.0 {
            terms.push(path.scale(kl_sign * w2 * c / n));
        }
    }
    let grad = if terms.is_empty() {
        pair.policy.params.zeros_like()
    } else {
        b.grads(&tape.backward(Var::vstack(&terms).sum()))
    };
    Ok(RlObjective { j, mean_reward, mean_kl, grad })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlTrainConfig {
    pub steps: usize,
    /// Memes drawn per step, cycling through a seeded shuffle.
    pub memes_per_step: usize,
    pub samples_per_meme: usize,
    pub objective: RlObjectiveConfig,
    pub optimizer: OptimizerConfig,
    pub clip: Option<f64>,
    /// Halt when the batch's mean KL estimate exceeds this.
    pub kl_ceiling: Option<f64>,
    pub seed: u64,
}

impl Default for RlTrainConfig {
    fn default() -> Self {
        RlTrainConfig {
            steps: 200,
            memes_per_step: 8,
            samples_per_meme: 4,
            objective: RlObjectiveConfig::default(),
            optimizer: OptimizerConfig::adam(5e-4),
            clip: Some(5.0),
            kl_ceiling: Some(50.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlLogRecord {
    pub step: usize,
    #[serde(rename = "J")]
    pub j: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
}

/// Trains `pair.policy` in place and returns the per-step log.
pub fn rl_train(pair: &mut PolicyPair, conds: &[Conditioning], reward: &dyn RewardFn, cfg: &RlTrainConfig) -> Result<Vec<RlLogRecord>> {
    if conds.is_empty() {
        return Err(Error::InvalidArgument("no memes for RL".into()));
    }
    if cfg.memes_per_step == 0 || cfg.samples_per_meme == 0 {
        return Err(Error::InvalidArgument("RL batches must be non-empty".into()));
    }
    pair.verify_reference()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.clip);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut samples = Vec::with_capacity(cfg.memes_per_step * cfg.samples_per_meme);
        for _ in 0..cfg.memes_per_step.min(conds.len()) {
            if order.is_empty() {
                order = (0..conds.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                order.reverse();
            }
            let meme = order.pop().unwrap();
            for _ in 0..cfg.samples_per_meme {
                samples.push(RlSample { meme, tokens: pair.policy.sample_with(&conds[meme], 1.0, &mut rng)? });
            }
        }
        let obj = rl_objective(&samples, conds, reward, pair, &cfg.objective)?;
        log.push(RlLogRecord { step, j: obj.j, mean_reward: obj.mean_reward, mean_kl: obj.mean_kl });
        if let Some(ceiling) = cfg.kl_ceiling {
            if obj.mean_kl > ceiling {
                return Err(Error::Training(format!(
                    "RL diverged at step {step}: mean KL {:.3} exceeds the ceiling {ceiling}",
                    obj.mean_kl
                )));
            }
        }
        let mut descent = obj.grad;
        for (_, g) in descent.iter_mut() {
            *g = g.scale(-1.0);
        }
        opt.step(&mut pair.policy.params, &descent);
        if !pair.policy.params.is_finite() {
            return Err(Error::Training(format!("policy parameters became non-finite at step {step}")));
        }
        log::debug!("rl step {step}: J {:.4} reward {:.4} kl {:.4}", obj.j, obj.mean_reward, obj.mean_kl);
    }
    pair.verify_reference()?;
    Ok(log)
}

/// Fraction of memes whose greedy captions differ between the two decoders.
pub fn greedy_disagreement(a: &Decoder, b: &Decoder, conds: &[Conditioning]) -> Result<f64> {
    if conds.is_empty() {
        return Err(Error::InvalidArgument("no memes".into()));
    }
    let greedy = crate::decoder::DecodeConfig::greedy();
    let mut differ = 0;
    for c in conds {
        differ += (a.generate(c, &greedy)? != b.generate(c, &greedy)?) as usize;
    }
    Ok(differ as f64 / conds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{DecodeConfig, DecoderConfig, HEAD, HEAD_BIAS};
    use crate::encode::EOS;
    use crate::tensor::Matrix;
    use rand::Rng;

    fn toy(vocab: usize, max_len: usize, seed: u64) -> Decoder {
        let cfg = DecoderConfig { vocab_size: vocab, width: 4, layers: 1, hidden: 6, max_len, cond_width: 2 };
        Decoder::new(cfg, seed).unwrap()
    }

    fn cond(seed: u64) -> Conditioning {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Conditioning { image: Matrix::randn(1, 2, 1.0, &mut rng), coh_ids: vec![] }
    }

    /// Every caption of up to `max_len` words.
    fn enumerate(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for p in &frontier {
                for t in 2..vocab {
                    let mut q: Vec<usize> = p.clone();
                    q.push(t);
                    next.push(q);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    fn perturbed(d: &Decoder, seed: u64, scale: f64) -> Decoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = d.clone();
        for (_, m) in p.params.iter_mut() {
            for v in m.data_mut() {
                *v += scale * rng.gen_range(-1.0..1.0);
            }
        }
        p
    }

    #[test]
    fn identical_models_have_zero_kl() {
        let d = toy(7, 4, 1);
        let pair = PolicyPair::new(&d);
        let c = cond(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let y = d.sample_with(&c, 1.0, &mut rng).unwrap();
            assert_eq!(kl_to_sft(&y, &c, &pair, Some(DEFAULT_LOG_PROB_FLOOR)).unwrap(), 0.0);
        }
    }

    #[test]
    fn two_word_fixture_matches_hand_log_ratio() {
        // the head ignores the hidden state, so probabilities come from the bias
        let fixed = |eos: f64, a: f64, b: f64| {
            let mut d = toy(4, 2, 0);
            *d.params.get_mut(HEAD) = Matrix::zeros(4, 4);
            *d.params.get_mut(HEAD_BIAS) = Matrix::from_vec(1, 4, vec![0.0, eos.ln(), a.ln(), b.ln()]);
            d
        };
        let policy = fixed(0.2, 0.5, 0.3);
        let reference = fixed(0.1, 0.3, 0.6);
        let pair = PolicyPair::with_policy(policy, &reference).unwrap();
        let c = cond(0);
        // first token: <eos> is barred so a and b renormalize; second is final
        let y = [2, 3];
        let expected = ((0.5 / 0.8) as f64).ln() + (0.3f64).ln() - ((0.3 / 0.9) as f64).ln() - (0.6f64).ln();
        assert!((kl_to_sft(&y, &c, &pair, None).unwrap() - expected).abs() < 1e-12);
        let y1 = [3];
        let expected1 = ((0.3 / 0.8) as f64).ln() + (0.2f64).ln() - ((0.6 / 0.9) as f64).ln() - (0.1f64).ln();
        assert!((kl_to_sft(&y1, &c, &pair, None).unwrap() - expected1).abs() < 1e-12);
        assert_eq!(EOS, 1);
    }

    #[test]
    fn floor_guards_zero_probability_tokens() {
        let mut reference = toy(4, 2, 0);
        *reference.params.get_mut(HEAD) = Matrix::zeros(4, 4);
        *reference.params.get_mut(HEAD_BIAS) = Matrix::from_vec(1, 4, vec![0.0, 0.0, 0.0, -1e4]);
        let pair = PolicyPair::with_policy(toy(4, 2, 0), &reference).unwrap();
        let c = cond(1);
        assert!(kl_to_sft(&[3], &c, &pair, None).is_err());
        let k = kl_to_sft(&[3], &c, &pair, Some(1e-8)).unwrap();
        assert!(k.is_finite() && k > 0.0);
    }

    #[test]
    fn monte_carlo_kl_matches_enumeration() {
        let reference = toy(5, 2, 4);
        let pair = PolicyPair::with_policy(perturbed(&reference, 5, 0.4), &reference).unwrap();
        let c = cond(6);
        let all = enumerate(5, 2);
        let mass: f64 = all.iter().map(|y| pair.policy.log_prob(&c, y).unwrap().exp()).sum();
        assert!((mass - 1.0).abs() < 1e-12);
        let exact: f64 = all
            .iter()
            .map(|y| pair.policy.log_prob(&c, y).unwrap().exp() * kl_to_sft(y, &c, &pair, None).unwrap())
            .sum();
        assert!(exact > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let ks: Vec<f64> = (0..n)
            .map(|_| kl_to_sft(&pair.policy.sample_with(&c, 1.0, &mut rng).unwrap(), &c, &pair, None).unwrap())
            .collect();
        let mean = ks.iter().sum::<f64>() / n as f64;
        let sd = (ks.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((mean - exact).abs() < 4.0 * sd / (n as f64).sqrt(), "{mean} vs {exact}");
        assert!(mean > -4.0 * sd / (n as f64).sqrt());
    }

    fn table_reward(y: &[usize]) -> f64 {
        y.iter().enumerate().map(|(i, t)| ((t * 7 + i * 3) % 5) as f64 / 4.0).sum::<f64>() / y.len() as f64
    }

    #[test]
    fn score_function_gradient_matches_enumeration() {
        let reference = toy(5, 2, 8);
        let pair = PolicyPair::with_policy(perturbed(&reference, 9, 0.05), &reference).unwrap();
        let conds = vec![cond(10)];
        let cfg = RlObjectiveConfig { weights: RlWeights { w1: 0.4, w2: 0.6 }, log_prob_floor: None, ..Default::default() };

        // J(φ) = Σ_y π(y) (w1 r(y) − w2 (log π(y) − log π_ref(y))), differentiated on the tape
        let all = enumerate(5, 2);
        let tape = Tape::new();
        let b = pair.policy.params.bind(&tape, true);
        let mut terms = Vec::new();
        for y in &all {
            let lp = pair.policy.sequence_log_prob(&tape, &b, &conds[0], y).unwrap();
            let lref = pair.reference().log_prob(&conds[0], y).unwrap();
            let inner = lp.scale(-0.6).add_const(0.4 * table_reward(y) + 0.6 * lref);
            terms.push(lp.exp().mul(inner));
        }
        let j_exact = Var::vstack(&terms).sum();
        let exact_value = j_exact.item();
        let exact = b.grads(&tape.backward(j_exact));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<RlSample> = (0..100_000)
            .map(|_| RlSample { meme: 0, tokens: pair.policy.sample_with(&conds[0], 1.0, &mut rng).unwrap() })
            .collect();
        let reward = |_: &Conditioning, y: &[usize]| table_reward(y);
        let est = rl_objective(&samples, &conds, &reward, &pair, &cfg).unwrap();
        assert!((est.j - exact_value).abs() < 1e-2, "{} vs {exact_value}", est.j);
        let mut worst: f64 = 0.0;
        for (name, g) in exact.iter() {
            worst = worst.max(g.max_abs_diff(est.grad.get(name)));
        }
        assert!(worst < 1e-3, "max gradient deviation {worst}");
    }

    #[test]
    fn degenerate_objectives() {
        let d = toy(6, 3, 12);
        let pair = PolicyPair::new(&d);
        let conds = vec![cond(13), cond(14)];
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let samples: Vec<RlSample> =
            (0..200).map(|i| RlSample { meme: i % 2, tokens: d.sample_with(&conds[i % 2], 1.0, &mut rng).unwrap() }).collect();
        let varying = |_: &Conditioning, y: &[usize]| y.len() as f64;
        let only_kl = RlObjectiveConfig { weights: RlWeights { w1: 0.0, w2: 1.0 }, ..Default::default() };
        let o = rl_objective(&samples, &conds, &varying, &pair, &only_kl).unwrap();
        assert_eq!(o.j, 0.0);
        assert!(o.grad.iter().all(|(_, g)| g.data().iter().all(|v| v.abs() < 1e-12)));

        let constant = |_: &Conditioning, _: &[usize]| 2.5;
        let only_r = RlObjectiveConfig { weights: RlWeights { w1: 0.4, w2: 0.0 }, ..Default::default() };
        let o = rl_objective(&samples, &conds, &constant, &pair, &only_r).unwrap();
        assert!((o.j - 1.0).abs() < 1e-12);
        assert!(o.grad.iter().all(|(_, g)| g.data().iter().all(|v| v.abs() < 1e-12)));

        assert!(rl_objective(&[], &conds, &constant, &pair, &only_r).is_err());
        let bad = RlObjectiveConfig { weights: RlWeights { w1: 0.0, w2: 0.0 }, ..Default::default() };
        assert!(rl_objective(&samples, &conds, &constant, &pair, &bad).is_err());
    }

    #[test]
    fn objective_is_linear_in_the_weights() {
        let reference = toy(6, 3, 16);
        let pair = PolicyPair::with_policy(perturbed(&reference, 17, 0.3), &reference).unwrap();
        let conds = vec![cond(18)];
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let samples: Vec<RlSample> =
            (0..50).map(|_| RlSample { meme: 0, tokens: pair.policy.sample_with(&conds[0], 1.0, &mut rng).unwrap() }).collect();
        let reward = |_: &Conditioning, y: &[usize]| table_reward(y);
        let at = |w1, w2| {
            let cfg = RlObjectiveConfig { weights: RlWeights { w1, w2 }, ..Default::default() };
            rl_objective(&samples, &conds, &reward, &pair, &cfg).unwrap().j
        };
        assert!((at(0.8, 1.2) - 2.0 * at(0.4, 0.6)).abs() < 1e-12);
        let literal = RlObjectiveConfig { paper_literal_sign: true, ..Default::default() };
        let o = rl_objective(&samples, &conds, &reward, &pair, &literal).unwrap();
        assert!((o.j - (0.4 * o.mean_reward + 0.6 * o.mean_kl)).abs() < 1e-12);
    }

    const FIT_STEPS: usize = 40;

    /// A toy decoder fitted to marker-free captions, standing in for SFT.
    fn marker_setup() -> (Decoder, Vec<Conditioning>) {
        let mut d = toy(8, 3, 20);
        let conds: Vec<Conditioning> = (0..6).map(|i| cond(30 + i)).collect();
        let mut captions: Vec<Vec<usize>> = (0..6).map(|i| vec![2 + i % 5, 2 + (i + 2) % 5]).collect();
        captions[5][1] = 7;
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.03), None);
        for _ in 0..FIT_STEPS {
            let tape = Tape::new();
            let b = d.params.bind(&tape, true);
            let losses: Vec<Var<'_>> = conds.iter().zip(&captions).map(|(c, y)| d.nll(&tape, &b, c, y).unwrap()).collect();
            let g = b.grads(&tape.backward(Var::vstack(&losses).mean()));
            opt.step(&mut d.params, &g);
        }
        (d, conds)
    }

    #[test]
    fn planted_reward_is_learned_and_reference_is_untouched() {
        let (d, conds) = marker_setup();
        let marker = 7;
        let has = |dec: &Decoder| {
            conds.iter().filter(|c| dec.generate(c, &DecodeConfig::greedy()).unwrap().contains(&marker)).count()
        };
        let before = has(&d);
        let mut pair = PolicyPair::new(&d);
        let checksum = pair.reference_checksum().to_string();
        let reward = move |_: &Conditioning, y: &[usize]| if y.contains(&marker) { 10.0 } else { 0.0 };
        let cfg = RlTrainConfig {
            steps: 60,
            memes_per_step: 6,
            samples_per_meme: 4,
            optimizer: OptimizerConfig::adam(0.02),
            ..RlTrainConfig::default()
        };
        let log = rl_train(&mut pair, &conds, &reward, &cfg).unwrap();
        assert_eq!(log.len(), 60);
        assert!(has(&pair.policy) >= 5 && before <= 1, "{before} -> {}", has(&pair.policy));
        assert_eq!(pair.reference().params.checksum(), checksum);
        let late: f64 = log[50..].iter().map(|r| r.mean_reward).sum::<f64>() / 10.0;
        assert!(late > log[0].mean_reward);

        let mut again = PolicyPair::new(&d);
        assert_eq!(rl_train(&mut again, &conds, &reward, &cfg).unwrap(), log);
        assert_eq!(again.policy, pair.policy);
    }

    #[test]
    fn heavy_kl_weight_anchors_the_policy() {
        let (d, conds) = marker_setup();
        let reward = |_: &Conditioning, y: &[usize]| if y.contains(&7) { 10.0 } else { 0.0 };
        let mut pair = PolicyPair::new(&d);
        let cfg = RlTrainConfig {
            steps: 60,
            memes_per_step: 6,
            samples_per_meme: 4,
            optimizer: OptimizerConfig::adam(0.02),
            objective: RlObjectiveConfig { weights: RlWeights { w1: 0.4, w2: 100.0 }, ..Default::default() },
            kl_ceiling: None,
            ..RlTrainConfig::default()
        };
        rl_train(&mut pair, &conds, &reward, &cfg).unwrap();
        let d = greedy_disagreement(&pair.policy, pair.reference(), &conds).unwrap();
        assert!(d <= 0.05, "{d}");
    }

    #[test]
    fn divergence_guard_halts_training() {
        let (d, conds) = marker_setup();
        let reward = |_: &Conditioning, y: &[usize]| if y.contains(&7) { 1000.0 } else { 0.0 };
        let mut pair = PolicyPair::new(&d);
        let cfg = RlTrainConfig {
            steps: 200,
            memes_per_step: 6,
            optimizer: OptimizerConfig::adam(0.2),
            objective: RlObjectiveConfig { weights: RlWeights { w1: 1.0, w2: 0.0 }, ..Default::default() },
            kl_ceiling: Some(0.5),
            ..RlTrainConfig::default()
        };
        let err = rl_train(&mut pair, &conds, &reward, &cfg).unwrap_err();
        assert!(err.to_string().contains("exceeds the ceiling"), "{err}");
    }
}
