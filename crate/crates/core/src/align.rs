//! Image–text alignment: projections into a shared space, token-level and
//! global attention similarity, and the in-batch contrastive objective.
//!
//! Rows are feature vectors throughout, so the projection of area `i` is
//! `W_M · m_i + b_M`, computed for all areas at once as `M · W_Mᵀ + b_M`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::{Bound, Params};
use crate::tensor::{log_sum_exp, Matrix};

pub const W_M: &str = "align.w_m";
pub const B_M: &str = "align.b_m";
pub const W_T: &str = "align.w_t";
pub const B_T: &str = "align.b_t";
pub const W_Q: &str = "align.w_q";
pub const W_K: &str = "align.w_k";

/// Which candidates compete with the positives of an image area.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMode {
    /// Every caption token in the batch.
    #[default]
    Token,
    /// Every caption in the batch, scored by its mean token energy.
    Caption,
}

/// Trainable tensors plus the fixed attention scale and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignParams {
    pub params: Params,
    pub d: usize,
    pub d_k: usize,
    pub tau: f64,
}

impl AlignParams {
    pub fn new(d: usize, d_k: usize, tau: f64, seed: u64) -> Result<Self> {
        if d == 0 || d_k == 0 {
            return Err(Error::InvalidArgument("d and d_k must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let mut params = Params::new();
        params.insert(W_M, Matrix::identity(d).add(&Matrix::randn(d, d, 0.1 * scale, &mut rng)));
        params.insert(B_M, Matrix::zeros(1, d));
        params.insert(W_T, Matrix::identity(d).add(&Matrix::randn(d, d, 0.1 * scale, &mut rng)));
        params.insert(B_T, Matrix::zeros(1, d));
        params.insert(W_Q, Matrix::randn(d, d_k, scale, &mut rng));
        params.insert(W_K, Matrix::randn(d, d_k, scale, &mut rng));
        let out = AlignParams { params, d, d_k, tau };
        out.validate()?;
        Ok(out)
    }

    pub fn from_params(params: Params, d_k: usize, tau: f64) -> Result<Self> {
        let d = params.try_get(W_M).map(Matrix::rows).unwrap_or(0);
        let out = AlignParams { params, d, d_k, tau };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("need d_k >= 1 and tau > 0, got {} and {}", self.d_k, self.tau)));
        }
        let expect = [
            (W_M, (self.d, self.d)),
            (B_M, (1, self.d)),
            (W_T, (self.d, self.d)),
            (B_T, (1, self.d)),
            (W_Q, (self.d, self.d_k)),
            (W_K, (self.d, self.d_k)),
        ];
        for (name, shape) in expect {
            match self.params.try_get(name) {
                Some(m) if m.shape() == shape => {}
                Some(m) => return Err(Error::Shape(format!("{name} is {:?}, expected {shape:?}", m.shape()))),
                None => return Err(Error::Shape(format!("missing {name}"))),
            }
        }
        if !self.params.is_finite() {
            return Err(Error::InvalidArgument("alignment parameters are not finite".into()));
        }
        Ok(())
    }
}

/// Tape handles for the alignment tensors.
#[derive(Clone, Copy)]
pub struct AlignVars<'t> {
    pub w_m: Var<'t>,
    pub b_m: Var<'t>,
    pub w_t: Var<'t>,
    pub b_t: Var<'t>,
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub d_k: usize,
}

impl<'t> AlignVars<'t> {
    pub fn from_bound(b: &Bound<'t>, d_k: usize) -> Self {
        AlignVars {
            w_m: b.get(W_M),
            b_m: b.get(B_M),
            w_t: b.get(W_T),
            b_t: b.get(B_T),
            w_q: b.get(W_Q),
            w_k: b.get(W_K),
            d_k,
        }
    }

    pub fn project_areas(&self, areas: Var<'t>) -> Var<'t> {
        areas.matmul_t(self.w_m).add_row(self.b_m)
    }

    pub fn project_tokens(&self, tokens: Var<'t>) -> Var<'t> {
        tokens.matmul_t(self.w_t).add_row(self.b_t)
    }

    /// Scaled energies `(M'·W_Q)(T'·W_K)ᵀ / √d_k`.
    pub fn scaled_energies(&self, m_proj: Var<'t>, t_proj: Var<'t>) -> Var<'t> {
        m_proj.matmul(self.w_q).matmul_t(t_proj.matmul(self.w_k)).scale(1.0 / (self.d_k as f64).sqrt())
    }

    /// Token-level attention, softmax over tokens per area.
    pub fn token_level(&self, m_proj: Var<'t>, t_proj: Var<'t>) -> Var<'t> {
        self.scaled_energies(m_proj, t_proj).softmax_rows()
    }
}

/// Attention between the areas of one meme and its caption tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    /// `N × n`, rows sum to one.
    pub token_level: Matrix,
    /// `1 × n`, column mean of `token_level`.
    pub global: Matrix,
    /// `N × n`, unscaled.
    pub energies: Matrix,
}

fn check_width(what: &str, m: &Matrix, d: usize) -> Result<()> {
    if m.cols() != d {
        return Err(Error::Shape(format!("{what} features are {:?} but the projection expects width {d}", m.shape())));
    }
    Ok(())
}

pub fn project(areas: &Matrix, tokens: &Matrix, params: &AlignParams) -> Result<(Matrix, Matrix)> {
    if areas.cols() != tokens.cols() {
        return Err(Error::Shape(format!("area features {:?} vs token features {:?}", areas.shape(), tokens.shape())));
    }
    check_width("area", areas, params.d)?;
    check_width("token", tokens, params.d)?;
    let p = &params.params;
    let m = areas.matmul_t(p.get(W_M)).add_row(p.get(B_M));
    let t = tokens.matmul_t(p.get(W_T)).add_row(p.get(B_T));
    Ok((m, t))
}

pub fn attention_similarity(m_proj: &Matrix, t_proj: &Matrix, params: &AlignParams) -> Result<AttentionMap> {
    if t_proj.rows() == 0 {
        return Err(Error::InvalidArgument("caption has no tokens".into()));
    }
    if m_proj.rows() == 0 {
        return Err(Error::InvalidArgument("no image areas".into()));
    }
    if m_proj.cols() != t_proj.cols() {
        return Err(Error::Shape(format!("projections {:?} and {:?} differ in width", m_proj.shape(), t_proj.shape())));
    }
    check_width("projected", m_proj, params.d)?;
    let p = &params.params;
    let energies = m_proj.matmul(p.get(W_Q)).matmul_t(&t_proj.matmul(p.get(W_K)));
    attention_from_energies(energies, params.d_k)
}

/// Normalizes raw energies into token-level and global similarity.
pub fn attention_from_energies(energies: Matrix, d_k: usize) -> Result<AttentionMap> {
    if energies.cols() == 0 {
        return Err(Error::InvalidArgument("caption has no tokens".into()));
    }
    if !energies.is_finite() {
        return Err(Error::InvalidArgument("attention energies are not finite".into()));
    }
    let token_level = energies.scale(1.0 / (d_k as f64).sqrt()).softmax_rows();
    let global = token_level.mean_rows();
    Ok(AttentionMap { token_level, global, energies })
}

/// Projection followed by attention.
pub fn attention_map(areas: &Matrix, tokens: &Matrix, params: &AlignParams) -> Result<AttentionMap> {
    let (m, t) = project(areas, tokens, params)?;
    attention_similarity(&m, &t, params)
}

/// `−log softmax(scores / τ)[positive]`.
pub fn contrastive_loss(scores: &[f64], positive: usize, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if scores.len() < 2 {
        return Err(Error::InvalidArgument("contrastive loss needs at least two candidates".into()));
    }
    if positive >= scores.len() {
        return Err(Error::InvalidArgument(format!("positive index {positive} out of {} candidates", scores.len())));
    }
    // shifting by the max keeps equal scores at exactly ln N'
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = scores.iter().map(|s| (s - max) / tau).collect();
    Ok((log_sum_exp(&shifted) - shifted[positive]).max(0.0))
}

/// Encoded features of one meme: all sub-image areas stacked, plus caption tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MemeFeatures {
    pub areas: Matrix,
    pub tokens: Matrix,
}

/// Batch contrastive loss built on `tape`. Positives of an area are its own
/// caption's tokens (or caption), negatives are everything else in the batch.
pub fn batch_loss_var<'t>(
    tape: &'t Tape,
    vars: &AlignVars<'t>,
    batch: &[MemeFeatures],
    tau: f64,
    mode: CandidateMode,
) -> Result<Var<'t>> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument("contrastive batch needs at least two memes for negatives".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let mut keys = Vec::with_capacity(batch.len());
    let mut offsets = Vec::with_capacity(batch.len());
    let mut total_tokens = 0;
    for m in batch {
        if m.tokens.rows() == 0 || m.areas.rows() == 0 {
            return Err(Error::InvalidArgument("meme with no areas or no tokens".into()));
        }
        offsets.push(total_tokens);
        total_tokens += m.tokens.rows();
        keys.push(vars.project_tokens(tape.constant(m.tokens.clone())).matmul(vars.w_k));
    }
    let keys = Var::vstack(&keys);
    let pooling = (mode == CandidateMode::Caption).then(|| {
        let mut a = Matrix::zeros(total_tokens, batch.len());
        for (c, m) in batch.iter().enumerate() {
            for k in 0..m.tokens.rows() {
                a[(offsets[c] + k, c)] = 1.0 / m.tokens.rows() as f64;
            }
        }
        tape.constant(a)
    });

    let mut total = None::<Var<'t>>;
    let mut area_count = 0usize;
    let inv_sqrt = 1.0 / (vars.d_k as f64).sqrt();
    for (b, m) in batch.iter().enumerate() {
        let queries = vars.project_areas(tape.constant(m.areas.clone())).matmul(vars.w_q);
        let energies = queries.matmul_t(keys).scale(inv_sqrt);
        let n_areas = m.areas.rows();
        area_count += n_areas;
        let term = match &pooling {
            None => {
                let scores = energies.softmax_rows();
                let log_p = scores.scale(1.0 / tau).log_softmax_rows();
                let own = log_p.transpose().slice_rows(offsets[b], offsets[b] + m.tokens.rows());
                own.sum().scale(1.0 / m.tokens.rows() as f64)
            }
            Some(a) => {
                let scores = energies.matmul(*a);
                scores.scale(1.0 / tau).log_softmax_rows().pick_per_row(&vec![b; n_areas]).sum()
            }
        };
        total = Some(match total {
            None => term,
            Some(t) => t.add(term),
        });
    }
    Ok(total.expect("non-empty batch").scale(-1.0 / area_count as f64))
}

/// Loss and gradients for every alignment tensor.
pub fn align_batch_loss(batch: &[MemeFeatures], params: &AlignParams, mode: CandidateMode) -> Result<(f64, Params)> {
    for m in batch {
        check_width("area", &m.areas, params.d)?;
        check_width("token", &m.tokens, params.d)?;
    }
    let tape = Tape::new();
    let bound = params.params.bind(&tape, true);
    let vars = AlignVars::from_bound(&bound, params.d_k);
    let loss = batch_loss_var(&tape, &vars, batch, params.tau, mode)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Training("alignment loss is not finite".into()));
    }
    let grads = tape.backward(loss);
    Ok((value, bound.grads(&grads)))
}

/// Loss only.
pub fn align_batch_value(batch: &[MemeFeatures], params: &AlignParams, mode: CandidateMode) -> Result<f64> {
    let tape = Tape::new();
    let bound = params.params.bind(&tape, false);
    let vars = AlignVars::from_bound(&bound, params.d_k);
    Ok(batch_loss_var(&tape, &vars, batch, params.tau, mode)?.item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub clip: Option<f64>,
    pub mode: CandidateMode,
    pub seed: u64,
}

impl Default for AlignTrainConfig {
    fn default() -> Self {
        AlignTrainConfig {
            epochs: 20,
            batch_size: 8,
            optimizer: OptimizerConfig::adam(0.01),
            clip: Some(5.0),
            mode: CandidateMode::Token,
            seed: 0,
        }
    }
}

/// Splits `0..n` into shuffled batches of at least two items.
pub fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(2)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("checked");
        out.last_mut().expect("checked").extend(tail);
    }
    out
}

/// Trains in place; returns the mean batch loss of every epoch.
pub fn train_align(memes: &[MemeFeatures], params: &mut AlignParams, cfg: &AlignTrainConfig) -> Result<Vec<f64>> {
    if memes.len() < 2 {
        return Err(Error::InvalidArgument("alignment training needs at least two memes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.clip);
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        let groups = batches(memes.len(), cfg.batch_size, &mut rng);
        for idx in &groups {
            let batch: Vec<MemeFeatures> = idx.iter().map(|&i| memes[i].clone()).collect();
            let (loss, grads) = align_batch_loss(&batch, params, cfg.mode)?;
            opt.step(&mut params.params, &grads);
            sum += loss;
        }
        log.push(sum / groups.len() as f64);
    }
    params.validate()?;
    Ok(log)
}

/// Prior global similarity: cosine between the mean projected area and the
/// caption pooled by its global attention weights.
pub fn global_similarity(m_proj: &Matrix, t_proj: &Matrix, global: &Matrix) -> f64 {
    let image = m_proj.mean_rows();
    let text = global.matmul(t_proj);
    cosine(image.data(), text.data())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
