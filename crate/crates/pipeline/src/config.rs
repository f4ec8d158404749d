//! Run configuration.
//!
//! One TOML file with a top-level `seed`, a `[stage.<name>]` table per stage
//! and a `[grid]` table. Every key is optional; an empty file gives the
//! default setup.

use std::path::{Path, PathBuf};

use memecap_core::align::CandidateMode;
use memecap_core::augment::{default_ops, AugmentOp};
use memecap_core::encode::VariantMode;
use memecap_core::params::sha256_hex;
use memecap_core::segment::{SegmentConfig, SegmentMode};
use serde::{Deserialize, Serialize};

use crate::PipelineError;

pub const DATA_DIR_ENV: &str = "MEMECAP_DATA_DIR";

/// Default prefix for baseline-mode conditioning.
pub const BASELINE_PROMPT: &str = "What is a humorous short sentence that complements the image as a meme?";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Artifact root. Relative paths resolve against the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub stage: Stages,
    pub grid: GridSpec,
}

impl Default for Config {
    fn default() -> Self {
        Config { seed: 7, data_dir: None, stage: Stages::default(), grid: GridSpec::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub ingest: IngestConfig,
    pub segment: SegmentStage,
    pub augment: AugmentStage,
    pub align: AlignStage,
    pub sft: SftStage,
    pub candidates: CandidatesStage,
    #[serde(rename = "annotate-serve")]
    pub annotate: AnnotateStage,
    #[serde(rename = "train-reward")]
    pub train_reward: RewardStage,
    pub rl: RlStage,
    pub evaluate: EvaluateStage,
    pub heatmap: HeatmapStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Existing manifest to import; without one a synthetic corpus is drawn.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub synthetic_size: usize,
    pub marker_fraction: f64,
    pub chain_of_humor: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { manifest: None, synthetic_size: 32, marker_fraction: 0.125, chain_of_humor: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentStage {
    pub mode: SegmentMode,
    pub std_fraction: f64,
    pub min_thickness: u32,
    pub max_fraction: f64,
}

impl Default for SegmentStage {
    fn default() -> Self {
        let d = SegmentConfig::default();
        SegmentStage { mode: SegmentMode::Auto, std_fraction: d.std_fraction, min_thickness: d.min_thickness, max_fraction: d.max_fraction }
    }
}

impl SegmentStage {
    pub fn core(&self) -> SegmentConfig {
        SegmentConfig { std_fraction: self.std_fraction, min_thickness: self.min_thickness, max_fraction: self.max_fraction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentStage {
    pub ops: Vec<AugmentOp>,
    pub variant_mode: VariantMode,
    /// Feature width.
    pub d: usize,
    /// Patch grid side.
    pub grid: usize,
    pub paraphrase: bool,
    /// Tab-separated synonym table; the bundled one when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synonyms: Option<PathBuf>,
    /// Longest caption the text encoder accepts.
    pub max_text_len: usize,
}

impl Default for AugmentStage {
    fn default() -> Self {
        AugmentStage {
            ops: default_ops(),
            variant_mode: VariantMode::Average,
            d: 64,
            grid: 4,
            paraphrase: true,
            synonyms: None,
            max_text_len: memecap_core::encode::MAX_TEXT_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignStage {
    pub d_k: usize,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub mode: CandidateMode,
}

impl Default for AlignStage {
    fn default() -> Self {
        AlignStage { d_k: 32, tau: 0.07, epochs: 20, batch_size: 8, lr: 0.01, clip: 5.0, mode: CandidateMode::Token }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// The record's chain-of-humor text when it has one.
    ChainOfHumor,
    /// The baseline prompt for every meme.
    Baseline,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftStage {
    pub lambda_ori: f64,
    pub lambda_g: f64,
    pub lambda_t: f64,
    pub trainable_weights: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip: f64,
    pub width: usize,
    pub layers: usize,
    pub hidden: usize,
    /// Longest generated caption.
    pub max_len: usize,
    pub paraphrases: bool,
    pub train_align: bool,
    pub conditioning: ConditioningMode,
    pub baseline_prompt: String,
}

impl Default for SftStage {
    fn default() -> Self {
        SftStage {
            lambda_ori: 0.4,
            lambda_g: 0.2,
            lambda_t: 0.4,
            trainable_weights: false,
            epochs: 20,
            batch_size: 8,
            lr: 0.1,
            momentum: 0.9,
            clip: 5.0,
            width: 64,
            layers: 2,
            hidden: 128,
            max_len: memecap_core::decoder::DEFAULT_MAX_LEN,
            paraphrases: true,
            train_align: false,
            conditioning: ConditioningMode::ChainOfHumor,
            baseline_prompt: BASELINE_PROMPT.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidatesStage {
    pub k: usize,
    pub temperature: f64,
    pub max_attempts: usize,
}

impl Default for CandidatesStage {
    fn default() -> Self {
        CandidatesStage { k: 4, temperature: 1.0, max_attempts: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateStage {
    pub fraction: f64,
    pub annotators: Vec<String>,
    pub min_annotators: usize,
    pub rubric: bool,
    pub addr: String,
}

impl Default for AnnotateStage {
    fn default() -> Self {
        AnnotateStage {
            fraction: 0.01,
            annotators: vec!["annotator-1".into(), "annotator-2".into(), "annotator-3".into()],
            min_annotators: 3,
            rubric: true,
            addr: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardStage {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    /// Borda weight of the human ordering when one exists.
    pub human_weight: f64,
}

impl Default for RewardStage {
    fn default() -> Self {
        RewardStage { steps: 500, batch_size: 8, lr: 3e-3, clip: 5.0, human_weight: memecap_core::reward::DEFAULT_HUMAN_WEIGHT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlStage {
    pub w1: f64,
    pub w2: f64,
    pub steps: usize,
    pub memes_per_step: usize,
    pub samples_per_meme: usize,
    pub lr: f64,
    pub clip: f64,
    /// Zero disables the guard.
    pub kl_ceiling: f64,
    pub paper_literal_sign: bool,
    /// Zero makes zero-probability tokens an error instead of flooring them.
    pub log_prob_floor: f64,
}

impl Default for RlStage {
    fn default() -> Self {
        RlStage {
            w1: 0.4,
            w2: 0.6,
            steps: 200,
            memes_per_step: 8,
            samples_per_meme: 4,
            lr: 5e-4,
            clip: 5.0,
            kl_ceiling: 50.0,
            paper_literal_sign: false,
            log_prob_floor: memecap_core::rl::DEFAULT_LOG_PROB_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoint {
    Sft,
    Rl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateStage {
    pub checkpoint: Checkpoint,
    pub split: String,
    /// Precomputed captions (`{"meme_id", "caption"}` lines) to score instead
    /// of generating.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub captions: Option<PathBuf>,
    /// Rubric means per meme (`{"meme_id", "scores"}` lines, already on the
    /// 0–100 scale).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub human_scores: Option<PathBuf>,
}

impl Default for EvaluateStage {
    fn default() -> Self {
        EvaluateStage { checkpoint: Checkpoint::Rl, split: "test".into(), captions: None, human_scores: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapStage {
    pub limit: usize,
    /// Heatmaps per caption, from its first token on.
    pub tokens: usize,
}

impl Default for HeatmapStage {
    fn default() -> Self {
        HeatmapStage { limit: 4, tokens: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// `[ori, g, t]` SFT weights.
    pub lambdas: Vec<[f64; 3]>,
    /// `[w1, w2]` RL weights.
    pub rl_weights: Vec<[f64; 2]>,
    pub objective: String,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lambdas: vec![[0.4, 0.2, 0.4], [0.5, 0.2, 0.3], [0.6, 0.2, 0.2]],
            rl_weights: vec![[0.5, 0.5], [0.4, 0.6], [0.6, 0.4]],
            objective: "Average".into(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

fn non_negative(name: &str, v: f64) -> Result<(), PipelineError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} = {v} must be finite and non-negative")))
    }
}

fn positive(name: &str, v: usize) -> Result<(), PipelineError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be at least 1")))
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.lambdas.is_empty() || self.rl_weights.is_empty() {
            return Err(invalid("grid needs at least one SFT and one RL weight combination"));
        }
        for l in &self.lambdas {
            for v in l {
                non_negative("grid lambda", *v)?;
            }
        }
        for w in &self.rl_weights {
            non_negative("grid w1", w[0])?;
            non_negative("grid w2", w[1])?;
            if w[0] == 0.0 && w[1] == 0.0 {
                return Err(invalid("grid RL weights cannot both be zero"));
            }
        }
        Ok(())
    }
}

impl Config {
    /// Parses TOML text; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Config, PipelineError> {
        let cfg: Config = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Config::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut() {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.stage.ingest.manifest);
        fix(&mut self.stage.augment.synonyms);
        fix(&mut self.stage.evaluate.captions);
        fix(&mut self.stage.evaluate.human_scores);
        if self.data_dir.is_none() {
            self.data_dir = Some(base.join("artifacts"));
        }
    }

    /// `MEMECAP_DATA_DIR`, then `data_dir`, then `./artifacts`.
    pub fn data_root(&self) -> PathBuf {
        match std::env::var_os(DATA_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.data_dir.clone().unwrap_or_else(|| PathBuf::from("artifacts")),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let s = &self.stage;
        if s.ingest.manifest.is_none() && s.ingest.synthetic_size < 2 {
            return Err(invalid("synthetic corpus needs at least 2 records"));
        }
        if !(0.0..=1.0).contains(&s.ingest.marker_fraction) {
            return Err(invalid("marker_fraction must lie in [0, 1]"));
        }
        positive("augment.d", s.augment.d)?;
        positive("augment.grid", s.augment.grid)?;
        if s.augment.max_text_len < 25 {
            return Err(invalid(format!("augment.max_text_len = {} must be at least 25", s.augment.max_text_len)));
        }
        positive("align.d_k", s.align.d_k)?;
        if !(s.align.tau > 0.0 && s.align.tau.is_finite()) {
            return Err(invalid("align.tau must be positive"));
        }
        positive("align.epochs", s.align.epochs)?;
        positive("align.batch_size", s.align.batch_size)?;
        for (n, v) in [("sft.lambda_ori", s.sft.lambda_ori), ("sft.lambda_g", s.sft.lambda_g), ("sft.lambda_t", s.sft.lambda_t)] {
            non_negative(n, v)?;
        }
        positive("sft.epochs", s.sft.epochs)?;
        positive("sft.batch_size", s.sft.batch_size)?;
        positive("sft.width", s.sft.width)?;
        positive("sft.hidden", s.sft.hidden)?;
        positive("sft.max_len", s.sft.max_len)?;
        if s.candidates.k < 2 {
            return Err(invalid("candidates.k must be at least 2"));
        }
        positive("candidates.max_attempts", s.candidates.max_attempts)?;
        non_negative("candidates.temperature", s.candidates.temperature)?;
        if !(s.annotate.fraction > 0.0 && s.annotate.fraction <= 1.0) {
            return Err(invalid("annotate-serve.fraction must lie in (0, 1]"));
        }
        if s.annotate.min_annotators < 2 {
            return Err(invalid("annotate-serve.min_annotators must be at least 2"));
        }
        positive("train-reward.batch_size", s.train_reward.batch_size)?;
        if !(0.0..=1.0).contains(&s.train_reward.human_weight) {
            return Err(invalid("train-reward.human_weight must lie in [0, 1]"));
        }
        non_negative("rl.w1", s.rl.w1)?;
        non_negative("rl.w2", s.rl.w2)?;
        if s.rl.w1 == 0.0 && s.rl.w2 == 0.0 {
            return Err(invalid("rl.w1 and rl.w2 cannot both be zero"));
        }
        positive("rl.memes_per_step", s.rl.memes_per_step)?;
        positive("rl.samples_per_meme", s.rl.samples_per_meme)?;
        non_negative("rl.kl_ceiling", s.rl.kl_ceiling)?;
        if !(s.rl.log_prob_floor >= 0.0 && s.rl.log_prob_floor < 1.0) {
            return Err(invalid("rl.log_prob_floor must lie in [0, 1)"));
        }
        if !["train", "test", "all"].contains(&s.evaluate.split.as_str()) {
            return Err(invalid(format!("evaluate.split {:?} is not train, test or all", s.evaluate.split)));
        }
        self.grid.validate()
    }

    /// SHA-256 of the canonical JSON form with every filesystem path and the
    /// service address removed, so moving a run does not change it.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data_dir = None;
        c.stage.ingest.manifest = None;
        c.stage.augment.synonyms = None;
        c.stage.evaluate.captions = None;
        c.stage.evaluate.human_scores = None;
        c.stage.annotate.addr.clear();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}
