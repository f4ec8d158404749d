//! Supervised fine-tuning with similarity-prior alignment.
//!
//! Besides the caption likelihood, the decoder is pulled toward the
//! similarities the alignment stage measured on the ground truth: a global
//! image/caption score and the token-level attention map. Each comparison is
//! a KL divergence between the two-point distributions obtained by a two-way
//! softmax of prior against prediction.
//!
//! During training the prediction side is teacher-forced and soft: the
//! decoder's next-token distributions mix the frozen text embedding table, so
//! the "generated" caption has the reference's length and every similarity
//! stays differentiable. [`predicted_similarity`] is the discrete version for
//! an actually generated caption.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{self, batches, AlignParams, AlignVars};
use crate::autodiff::{Tape, Var};
use crate::decoder::{Conditioning, DecodeConfig, Decoder};
use crate::encode::{sinusoidal_positions, EmbeddingTextEncoder};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::Params;
use crate::tensor::{softmax_in_place, Matrix};

pub const LAMBDA_ORI: &str = "sft.lambda_ori";
pub const LAMBDA_G: &str = "sft.lambda_g";
pub const LAMBDA_T: &str = "sft.lambda_t";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftWeights {
    pub ori: f64,
    pub g: f64,
    pub t: f64,
    /// Learn the weights along with the model (clamped at zero).
    #[serde(default)]
    pub trainable: bool,
}

impl Default for SftWeights {
    fn default() -> Self {
        SftWeights { ori: 0.4, g: 0.2, t: 0.4, trainable: false }
    }
}

impl SftWeights {
    pub fn new(ori: f64, g: f64, t: f64) -> Self {
        SftWeights { ori, g, t, trainable: false }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ori", self.ori), ("g", self.g), ("t", self.t)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("SFT weight {name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    fn to_params(self) -> Params {
        let mut p = Params::new();
        p.insert(LAMBDA_ORI, Matrix::scalar(self.ori));
        p.insert(LAMBDA_G, Matrix::scalar(self.g));
        p.insert(LAMBDA_T, Matrix::scalar(self.t));
        p
    }
}

/// `(e^a, e^b) / (e^a + e^b)`.
pub fn binary_softmax_pair(a: f64, b: f64) -> (f64, f64) {
    let p = 1.0 / (1.0 + (b - a).exp());
    let q = 1.0 / (1.0 + (a - b).exp());
    (p, q)
}

/// KL divergence between the two-point distributions `(p, 1-p)` and `(q, 1-q)`.
pub fn two_point_kl(p: f64, q: f64) -> f64 {
    let term = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * (x / y).ln() };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

/// KL between the two halves of `binary_softmax_pair(a, b)`, in closed form:
/// `(a - b)·tanh((a - b)/2)`.
pub fn pair_kl(a: f64, b: f64) -> f64 {
    let x = a - b;
    x * (0.5 * x).tanh()
}

fn pair_kl_var<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let x = a.sub(b);
    x.mul(x.scale(0.5).tanh()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPrior {
    pub s_i: f64,
    /// `N × n` attention of the reference caption.
    pub token_level: Matrix,
    pub s_sft: f64,
    pub token_level_sft: Matrix,
}

impl SimilarityPrior {
    pub fn validate(&self) -> Result<()> {
        if self.token_level.shape() != self.token_level_sft.shape() {
            return Err(Error::Shape(format!(
                "prior token-level similarity is {:?} but the prediction is {:?}",
                self.token_level.shape(),
                self.token_level_sft.shape()
            )));
        }
        let finite = self.s_i.is_finite() && self.s_sft.is_finite();
        if !finite || !self.token_level.is_finite() || !self.token_level_sft.is_finite() {
            return Err(Error::InvalidArgument("similarities must be finite".into()));
        }
        Ok(())
    }
}

/// `(λ_g·KL_global, λ_t·Σ KL_token)`.
pub fn kl_alignment_losses(prior: &SimilarityPrior, weights: &SftWeights) -> Result<(f64, f64)> {
    prior.validate()?;
    weights.validate()?;
    let l_g = weights.g * pair_kl(prior.s_i, prior.s_sft);
    let kl_t: f64 = prior.token_level.data().iter().zip(prior.token_level_sft.data()).map(|(a, b)| pair_kl(*a, *b)).sum();
    Ok((l_g, weights.t * kl_t))
}

/// Cosine that refuses zero vectors.
pub fn cosine_checked(a: &[f64], b: &[f64]) -> Result<f64> {
    let zero = |v: &[f64]| v.iter().all(|x| *x == 0.0);
    if zero(a) || zero(b) {
        return Err(Error::InvalidArgument("cosine of a zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    // a single square root keeps cos(a, a) at exactly one
    Ok(dot / (na * nb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedSimilarity {
    pub scalar: f64,
    /// `N × |generated|`
    pub token_level: Matrix,
}

/// Similarity of a generated caption to the reference and to the image areas.
pub fn predicted_similarity(
    generated: &[usize],
    reference: &[usize],
    text: &EmbeddingTextEncoder,
    areas: &Matrix,
    align_params: &AlignParams,
) -> Result<PredictedSimilarity> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument("captions must be non-empty".into()));
    }
    let g = text.encode_ids(generated)?;
    let r = text.encode_ids(reference)?;
    let scalar = cosine_checked(g.mean_rows().data(), r.mean_rows().data())?;
    let token_level = align::attention_map(areas, &g, align_params)?.token_level;
    Ok(PredictedSimilarity { scalar, token_level })
}

/// Meme-level image feature for the decoder: projected areas pooled by
/// their mean attention energy against the chain-of-humor tokens, or
/// averaged uniformly without one.
pub fn image_conditioning(areas: &Matrix, coh_features: Option<&Matrix>, align_params: &AlignParams) -> Result<Matrix> {
    let m = areas.matmul_t(align_params.params.get(align::W_M)).add_row(align_params.params.get(align::B_M));
    let n = m.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("no image areas".into()));
    }
    let weights = match coh_features {
        Some(c) if c.rows() > 0 => {
            let (m_proj, t_proj) = align::project(areas, c, align_params)?;
            let att = align::attention_similarity(&m_proj, &t_proj, align_params)?;
            let scale = 1.0 / (align_params.d_k as f64).sqrt();
            let mut w: Vec<f64> =
                (0..n).map(|i| att.energies.row(i).iter().sum::<f64>() / c.rows() as f64 * scale).collect();
            softmax_in_place(&mut w);
            w
        }
        _ => vec![1.0 / n as f64; n],
    };
    Ok(Matrix::row_vector(&weights).matmul(&m))
}

/// One training meme with its frozen targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub id: String,
    /// Raw `N × d` area features.
    pub areas: Matrix,
    pub coh_ids: Vec<usize>,
    pub reference: Vec<usize>,
    /// `L × d` text features of the reference.
    pub ref_features: Matrix,
    pub cond: Conditioning,
    pub s_i: f64,
    /// `N × L`
    pub token_prior: Matrix,
}

impl SftExample {
    pub fn new(
        id: impl Into<String>,
        areas: Matrix,
        reference: Vec<usize>,
        coh_ids: Vec<usize>,
        text: &EmbeddingTextEncoder,
        align_params: &AlignParams,
    ) -> Result<SftExample> {
        let ref_features = text.encode_ids(&reference)?;
        let mut ex = SftExample {
            id: id.into(),
            areas,
            coh_ids,
            reference,
            ref_features,
            cond: Conditioning { image: Matrix::zeros(1, 1), coh_ids: Vec::new() },
            s_i: 0.0,
            token_prior: Matrix::zeros(0, 0),
        };
        ex.refresh(text, align_params)?;
        Ok(ex)
    }

    /// Recomputes the align-dependent parts after the alignment changed.
    pub fn refresh(&mut self, text: &EmbeddingTextEncoder, align_params: &AlignParams) -> Result<()> {
        let (m, t) = align::project(&self.areas, &self.ref_features, align_params)
            .map_err(|e| Error::record(&self.id, e.to_string()))?;
        let att = align::attention_similarity(&m, &t, align_params)?;
        self.s_i = align::global_similarity(&m, &t, &att.global);
        self.token_prior = att.token_level;
        let coh = if self.coh_ids.is_empty() { None } else { Some(text.encode_ids(&self.coh_ids)?) };
        self.cond = Conditioning {
            image: image_conditioning(&self.areas, coh.as_ref(), align_params)?,
            coh_ids: self.coh_ids.clone(),
        };
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SftLossParts {
    pub total: f64,
    /// Unweighted mean token NLL.
    pub ori: f64,
    /// Weighted global KL term.
    pub g: f64,
    /// Weighted token-level KL term.
    pub t: f64,
}

struct LossVars<'t> {
    total: Var<'t>,
    ori: Var<'t>,
    g: Var<'t>,
    t: Var<'t>,
}

fn cosine_var<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let norm = |v: Var<'t>| v.mul(v).sum().add_const(1e-24).sqrt();
    a.mul(b).sum().div(norm(a).mul(norm(b)))
}

fn loss_vars<'t>(
    tape: &'t Tape,
    batch: &[&SftExample],
    decoder: &Decoder,
    dec: &crate::params::Bound<'t>,
    av: &AlignVars<'t>,
    lambdas: &crate::params::Bound<'t>,
    table: Var<'t>,
) -> Result<LossVars<'t>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty SFT batch".into()));
    }
    let mut ori = Vec::new();
    let mut g = Vec::new();
    let mut t = Vec::new();
    for ex in batch {
        let nll = decoder.nll(tape, dec, &ex.cond, &ex.reference).map_err(|e| Error::record(&ex.id, e.to_string()))?;
        ori.push(nll);
        let probs = decoder.soft_predictions(tape, dec, &ex.cond, &ex.reference)?;
        let l = ex.reference.len();
        let soft = probs.matmul(table).add(tape.constant(sinusoidal_positions(l, ex.ref_features.cols())));
        let s_sft = cosine_var(soft.mean_rows(), tape.constant(ex.ref_features.mean_rows()));
        g.push(pair_kl_var(tape.scalar(ex.s_i), s_sft));
        let m_proj = av.project_areas(tape.constant(ex.areas.clone()));
        let predicted = av.token_level(m_proj, av.project_tokens(soft));
        t.push(pair_kl_var(tape.constant(ex.token_prior.clone()), predicted));
    }
    let n = batch.len() as f64;
    let mean = |v: Vec<Var<'t>>| Var::vstack(&v).sum().scale(1.0 / n);
    let ori = mean(ori);
    let g = mean(g).mul_scalar(lambdas.get(LAMBDA_G));
    let t = mean(t).mul_scalar(lambdas.get(LAMBDA_T));
    let total = ori.mul_scalar(lambdas.get(LAMBDA_ORI)).add(g).add(t);
    Ok(LossVars { total, ori, g, t })
}

/// What [`sft_loss`] differentiates besides the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub align: bool,
    pub weights: bool,
}

/// Loss and gradients. The gradient set holds the decoder tensors, plus the
/// alignment tensors and `sft.lambda_*` when those are trainable.
pub fn sft_loss(
    batch: &[&SftExample],
    decoder: &Decoder,
    align_params: &AlignParams,
    text: &EmbeddingTextEncoder,
    weights: &SftWeights,
    trainable: Trainable,
) -> Result<(SftLossParts, Params)> {
    weights.validate()?;
    let tape = Tape::new();
    let dec = decoder.params.bind(&tape, true);
    let ab = align_params.params.bind(&tape, trainable.align);
    let lb = weights.to_params().bind(&tape, trainable.weights);
    let av = AlignVars::from_bound(&ab, align_params.d_k);
    let lv = loss_vars(&tape, batch, decoder, &dec, &av, &lb, tape.constant(text.table.clone()))?;
    let parts = SftLossParts { total: lv.total.item(), ori: lv.ori.item(), g: lv.g.item(), t: lv.t.item() };
    let grads = tape.backward(lv.total);
    let mut out = dec.grads(&grads);
    if trainable.align {
        for (n, m) in ab.grads(&grads).iter() {
            out.insert(n, m.clone());
        }
    }
    if trainable.weights {
        for (n, m) in lb.grads(&grads).iter() {
            out.insert(n, m.clone());
        }
    }
    Ok((parts, out))
}

/// Forward-only loss.
pub fn sft_loss_value(
    batch: &[&SftExample],
    decoder: &Decoder,
    align_params: &AlignParams,
    text: &EmbeddingTextEncoder,
    weights: &SftWeights,
) -> Result<SftLossParts> {
    weights.validate()?;
    let tape = Tape::new();
    let dec = decoder.params.bind(&tape, false);
    let ab = align_params.params.bind(&tape, false);
    let lb = weights.to_params().bind(&tape, false);
    let av = AlignVars::from_bound(&ab, align_params.d_k);
    let lv = loss_vars(&tape, batch, decoder, &dec, &av, &lb, tape.constant(text.table.clone()))?;
    Ok(SftLossParts { total: lv.total.item(), ori: lv.ori.item(), g: lv.g.item(), t: lv.t.item() })
}

pub fn generate_caption(decoder: &Decoder, cond: &Conditioning, cfg: &DecodeConfig) -> Result<Vec<usize>> {
    decoder.generate(cond, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub clip: Option<f64>,
    pub seed: u64,
    pub weights: SftWeights,
    /// Keep training the alignment tensors.
    pub train_align: bool,
}

impl Default for SftTrainConfig {
    fn default() -> Self {
        SftTrainConfig {
            epochs: 20,
            batch_size: 8,
            optimizer: OptimizerConfig::momentum(0.1, 0.9),
            clip: Some(5.0),
            seed: 0,
            weights: SftWeights::default(),
            train_align: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftLogRecord {
    pub epoch: usize,
    #[serde(rename = "L_SFT")]
    pub l_sft: f64,
    #[serde(rename = "L_ori")]
    pub l_ori: f64,
    #[serde(rename = "L_g")]
    pub l_g: f64,
    #[serde(rename = "L_t")]
    pub l_t: f64,
}

impl SftLogRecord {
    fn new(epoch: usize, p: SftLossParts) -> Self {
        SftLogRecord { epoch, l_sft: p.total, l_ori: p.ori, l_g: p.g, l_t: p.t }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftOutcome {
    /// Epoch 0 is the untrained model; each later record is measured over all
    /// examples after that epoch.
    pub log: Vec<SftLogRecord>,
    pub weights: SftWeights,
}

pub const SFT_BLOB_KIND: &str = "sft";

/// Trains in place. With `out_dir`, writes `sft_epoch_NN.blob` after every
/// epoch (plus `align_epoch_NN.blob` when the alignment trains) and the log
/// as `sft_log.jsonl`.
pub fn train_sft(
    examples: &mut [SftExample],
    decoder: &mut Decoder,
    align_params: &mut AlignParams,
    text: &EmbeddingTextEncoder,
    cfg: &SftTrainConfig,
    out_dir: Option<&Path>,
) -> Result<SftOutcome> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no SFT examples".into()));
    }
    cfg.weights.validate()?;
    let trainable = Trainable { align: cfg.train_align, weights: cfg.weights.trainable };
    let mut weights = cfg.weights;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.clip);
    let evaluate = |examples: &[SftExample], decoder: &Decoder, align_params: &AlignParams, w: &SftWeights| {
        let all: Vec<&SftExample> = examples.iter().collect();
        sft_loss_value(&all, decoder, align_params, text, w)
    };
    let mut log = vec![SftLogRecord::new(0, evaluate(examples, decoder, align_params, &weights)?)];
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for epoch in 1..=cfg.epochs {
        for group in batches(examples.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<&SftExample> = group.iter().map(|&i| &examples[i]).collect();
            let (parts, grads) = sft_loss(&batch, decoder, align_params, text, &weights, trainable)?;
            if !parts.total.is_finite() {
                return Err(Error::Training(format!("SFT loss diverged in epoch {epoch}")));
            }
            let mut all = decoder.params.clone();
            if trainable.align {
                for (n, m) in align_params.params.iter() {
                    all.insert(n, m.clone());
                }
            }
            if trainable.weights {
                for (n, m) in weights.to_params().iter() {
                    all.insert(n, m.clone());
                }
            }
            opt.step(&mut all, &grads);
            for (n, m) in decoder.params.iter_mut() {
                *m = all.get(n).clone();
            }
            if trainable.align {
                for (n, m) in align_params.params.iter_mut() {
                    *m = all.get(n).clone();
                }
            }
            if trainable.weights {
                weights.ori = all.get(LAMBDA_ORI).item().max(0.0);
                weights.g = all.get(LAMBDA_G).item().max(0.0);
                weights.t = all.get(LAMBDA_T).item().max(0.0);
            }
        }
        if trainable.align {
            align_params.validate()?;
            for ex in examples.iter_mut() {
                ex.refresh(text, align_params)?;
            }
        }
        let record = SftLogRecord::new(epoch, evaluate(examples, decoder, align_params, &weights)?);
        log::debug!("sft epoch {epoch}: {record:?}");
        log.push(record);
        if let Some(dir) = out_dir {
            let meta = serde_json::json!({ "epoch": epoch, "weights": weights });
            let path = dir.join(format!("sft_epoch_{epoch:02}.blob"));
            std::fs::write(&path, decoder.to_blob(SFT_BLOB_KIND, meta.clone())).map_err(|e| Error::io(&path, e))?;
            if trainable.align {
                let path = dir.join(format!("align_epoch_{epoch:02}.blob"));
                let bytes = align_params.params.to_blob("align", &meta);
                std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        let mut text_log = String::new();
        for r in &log {
            text_log.push_str(&serde_json::to_string(r)?);
            text_log.push('\n');
        }
        let path = dir.join("sft_log.jsonl");
        std::fs::write(&path, text_log).map_err(|e| Error::io(&path, e))?;
    }
    Ok(SftOutcome { log, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::encode::Vocab;
    use crate::gradcheck::{check_params, FD_EPSILON, FD_TOLERANCE};
    use proptest::prelude::*;

    const D: usize = 4;

    fn vocab() -> Vocab {
        Vocab::from_words(["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect(), true)
    }

    struct Fixture {
        text: EmbeddingTextEncoder,
        align: AlignParams,
        decoder: Decoder,
        examples: Vec<SftExample>,
    }

    fn fixture(seed: u64, n: usize) -> Fixture {
        let v = vocab();
        let text = EmbeddingTextEncoder::new(v.clone(), D, seed);
        let align = AlignParams::new(D, 3, 0.1, seed + 1).unwrap();
        let cfg = DecoderConfig { vocab_size: v.len(), width: 6, layers: 1, hidden: 8, max_len: 5, cond_width: D };
        let decoder = Decoder::new(cfg, seed + 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let first = v.id("a").unwrap();
        let examples = (0..n)
            .map(|i| {
                let len = 2 + i % 3;
                let reference: Vec<usize> = (0..len).map(|k| first + (i + 2 * k) % 5).collect();
                let coh = if i % 2 == 0 { vec![first + i % 5, first + 4] } else { vec![] };
                SftExample::new(format!("m{i}"), Matrix::randn(2 + i % 2, D, 1.0, &mut rng), reference, coh, &text, &align)
                    .unwrap()
            })
            .collect();
        Fixture { text, align, decoder, examples }
    }

    #[test]
    fn pair_fixtures() {
        assert_eq!(binary_softmax_pair(0.7, 0.7), (0.5, 0.5));
        let (p, q) = binary_softmax_pair(1.0, 0.0);
        assert!((p - 0.73106).abs() < 5e-6 && (q - 0.26894).abs() < 5e-6);
        assert!((p + q - 1.0).abs() < 1e-15);
        let (p2, q2) = binary_softmax_pair(0.0, 1.0);
        assert_eq!((p, q), (q2, p2));
    }

    #[test]
    fn scalar_kl_matches_the_direct_two_point_formula() {
        let prior = SimilarityPrior {
            s_i: 1.0,
            token_level: Matrix::zeros(1, 1),
            s_sft: 0.0,
            token_level_sft: Matrix::zeros(1, 1),
        };
        let (l_g, l_t) = kl_alignment_losses(&prior, &SftWeights::new(0.0, 1.0, 1.0)).unwrap();
        let (p, q) = binary_softmax_pair(1.0, 0.0);
        let direct = p * (p / q).ln() + q * (q / p).ln();
        assert!((l_g - direct).abs() < 1e-14);
        assert!((direct - 0.46211715726000974).abs() < 1e-12);
        assert_eq!(l_t, 0.0);
    }

    #[test]
    fn identical_similarities_give_zero_loss() {
        let m = Matrix::from_vec(2, 2, vec![0.1, 0.9, 0.4, 0.6]);
        let prior = SimilarityPrior { s_i: 0.3, token_level: m.clone(), s_sft: 0.3, token_level_sft: m };
        assert_eq!(kl_alignment_losses(&prior, &SftWeights::default()).unwrap(), (0.0, 0.0));
        let bad = SimilarityPrior { token_level_sft: Matrix::zeros(2, 3), ..prior };
        assert!(kl_alignment_losses(&bad, &SftWeights::default()).is_err());
    }

    proptest! {
        #[test]
        fn kl_terms_are_non_negative_and_vanish_only_at_equality(
            a in -3.0f64..3.0, b in -3.0f64..3.0,
            m in proptest::collection::vec(0.0f64..1.0, 6),
            n in proptest::collection::vec(0.0f64..1.0, 6),
        ) {
            let prior = SimilarityPrior {
                s_i: a,
                token_level: Matrix::from_vec(2, 3, m.clone()),
                s_sft: b,
                token_level_sft: Matrix::from_vec(2, 3, n.clone()),
            };
            let (g, t) = kl_alignment_losses(&prior, &SftWeights::new(1.0, 1.0, 1.0)).unwrap();
            prop_assert!(g >= 0.0 && t >= 0.0);
            prop_assert!((pair_kl(a, b) - two_point_kl(binary_softmax_pair(a, b).0, binary_softmax_pair(a, b).1)).abs() < 1e-12);
            prop_assert_eq!(g == 0.0, a == b);
            prop_assert_eq!(t == 0.0, m == n);
        }
    }

    #[test]
    fn predicted_similarity_fixtures() {
        let f = fixture(1, 1);
        let ex = &f.examples[0];
        let same = predicted_similarity(&ex.reference, &ex.reference, &f.text, &ex.areas, &f.align).unwrap();
        assert_eq!(same.scalar, 1.0);
        assert_eq!(same.token_level.shape(), (ex.areas.rows(), ex.reference.len()));

        // single-token captions share position 0 = [0, 1, 0, 1]
        let mut text = f.text.clone();
        text.table = Matrix::zeros(vocab().len(), D);
        let (x, y, z) = (10, 11, 12);
        for (c, v) in [1.0, -1.0, 0.0, -1.0].into_iter().enumerate() {
            text.table[(x, c)] = v;
        }
        for (c, v) in [0.0, -1.0, 1.0, -1.0].into_iter().enumerate() {
            text.table[(y, c)] = v;
        }
        for (c, v) in [2.0, 0.0, 1.0, -1.0].into_iter().enumerate() {
            text.table[(z, c)] = v;
        }
        let orth = predicted_similarity(&[x], &[y], &text, &ex.areas, &f.align).unwrap();
        assert_eq!(orth.scalar, 0.0);
        // pooled [1.5, 0.5, 0.5, 0.5] (x then z) against [0, 0, 1, 0]
        let mixed = predicted_similarity(&[x, z], &[y], &text, &ex.areas, &f.align).unwrap();
        let p1 = sinusoidal_positions(2, D);
        let pooled: Vec<f64> = (0..D).map(|c| (text.table[(x, c)] + text.table[(z, c)] + p1[(0, c)] + p1[(1, c)]) / 2.0).collect();
        let expected = pooled[2] / pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((mixed.scalar - expected).abs() < 1e-12);
        // a token cancelling its position has no direction
        for (c, v) in [0.0, -1.0, 0.0, -1.0].into_iter().enumerate() {
            text.table[(z, c)] = v;
        }
        assert!(predicted_similarity(&[z], &[y], &text, &ex.areas, &f.align).is_err());
        assert!(predicted_similarity(&[], &[y], &text, &ex.areas, &f.align).is_err());
    }

    #[test]
    fn zero_alignment_weights_reduce_to_scaled_nll() {
        let f = fixture(2, 2);
        let batch: Vec<&SftExample> = f.examples.iter().collect();
        let w = SftWeights::new(0.7, 0.0, 0.0);
        let (parts, _) = sft_loss(&batch, &f.decoder, &f.align, &f.text, &w, Trainable::default()).unwrap();
        let tape = Tape::new();
        let b = f.decoder.params.bind(&tape, false);
        let nll: f64 = f.examples.iter().map(|e| f.decoder.nll(&tape, &b, &e.cond, &e.reference).unwrap().item()).sum::<f64>() / 2.0;
        assert!((parts.total - 0.7 * nll).abs() < 1e-12);
        assert_eq!((parts.g, parts.t), (0.0, 0.0));
    }

    #[test]
    fn loss_is_linear_in_the_weights() {
        let f = fixture(3, 3);
        let batch: Vec<&SftExample> = f.examples.iter().collect();
        let one = sft_loss_value(&batch, &f.decoder, &f.align, &f.text, &SftWeights::new(0.4, 0.2, 0.4)).unwrap();
        let two = sft_loss_value(&batch, &f.decoder, &f.align, &f.text, &SftWeights::new(0.8, 0.4, 0.8)).unwrap();
        assert_eq!(two.total, 2.0 * one.total);
        assert!(one.g > 0.0 && one.t > 0.0);
    }

    #[test]
    fn certain_decoder_has_zero_caption_loss() {
        let f = fixture(4, 1);
        let mut dec = f.decoder.clone();
        let ex = &f.examples[0];
        // a head that ignores the hidden state and puts all mass on one token
        // gives zero NLL for a caption repeating that token
        let token = ex.reference[0];
        let reference = vec![token; dec.config.max_len];
        *dec.params.get_mut(crate::decoder::HEAD) = Matrix::zeros(dec.config.width, dec.config.vocab_size);
        let mut bias = Matrix::filled(1, dec.config.vocab_size, -1e4);
        bias[(0, token)] = 0.0;
        *dec.params.get_mut(crate::decoder::HEAD_BIAS) = bias;
        let ex = SftExample::new("x", ex.areas.clone(), reference, vec![], &f.text, &f.align).unwrap();
        let parts = sft_loss_value(&[&ex], &dec, &f.align, &f.text, &SftWeights::default()).unwrap();
        assert_eq!(parts.ori, 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let f = fixture(10 + seed, 2);
            let batch: Vec<&SftExample> = f.examples.iter().collect();
            let w = SftWeights { trainable: true, ..SftWeights::new(0.4, 0.6, 0.9) };
            let all_on = Trainable { align: true, weights: true };
            let (_, grads) = sft_loss(&batch, &f.decoder, &f.align, &f.text, &w, all_on).unwrap();
            let mut params = f.decoder.params.clone();
            for (n, m) in f.align.params.iter().chain(w.to_params().iter()) {
                params.insert(n, m.clone());
            }
            let report = check_params(&params, &grads, FD_EPSILON, 5, seed, |p| {
                let dec = Decoder { config: f.decoder.config, params: p.subset("dec.") };
                let al = AlignParams { params: p.subset("align."), ..f.align.clone() };
                let w = SftWeights::new(p.get(LAMBDA_ORI).item(), p.get(LAMBDA_G).item(), p.get(LAMBDA_T).item());
                sft_loss_value(&batch, &dec, &al, &f.text, &w).unwrap().total
            });
            assert!(report.passes(FD_TOLERANCE), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn overfits_five_captions() {
        let mut f = fixture(5, 5);
        let cfg = SftTrainConfig {
            epochs: 150,
            batch_size: 5,
            optimizer: OptimizerConfig::adam(0.02),
            ..SftTrainConfig::default()
        };
        let out = train_sft(&mut f.examples, &mut f.decoder, &mut f.align, &f.text, &cfg, None).unwrap();
        assert!(out.log.last().unwrap().l_sft < 0.5 * out.log[0].l_sft);
        for ex in &f.examples {
            let got = generate_caption(&f.decoder, &ex.cond, &DecodeConfig::greedy()).unwrap();
            assert_eq!(got, ex.reference, "{}", ex.id);
        }
    }

    #[test]
    fn training_is_deterministic_and_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SftTrainConfig { epochs: 2, batch_size: 2, train_align: true, ..SftTrainConfig::default() };
        let run = |out: Option<&Path>| {
            let mut f = fixture(6, 4);
            let o = train_sft(&mut f.examples, &mut f.decoder, &mut f.align, &f.text, &cfg, out).unwrap();
            (o.log, f.decoder.params.checksum())
        };
        let a = run(Some(dir.path()));
        assert_eq!(a, run(None));
        assert_eq!(a.0.len(), 3);
        for name in ["sft_epoch_01.blob", "sft_epoch_02.blob", "align_epoch_02.blob"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let log = std::fs::read_to_string(dir.path().join("sft_log.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first["epoch"], 0);
        assert!(first["L_SFT"].is_number() && first["L_t"].is_number());
        let (dec, blob) = Decoder::from_blob(&std::fs::read(dir.path().join("sft_epoch_02.blob")).unwrap()).unwrap();
        assert_eq!(blob.meta["extra"]["epoch"], 2);
        assert_eq!(dec.params.checksum(), a.1);
    }
}
