use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{default_criteria, AnnotationSet, AnnotationTask, Criterion, TaskKind};
use crate::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueueConfig {
    /// Fraction of candidate sets sent to annotators; at least one set is
    /// always taken.
    pub fraction: f64,
    pub seed: u64,
    /// Also ask for rubric scores on every caption of a sampled set.
    pub rubric: bool,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig { fraction: 0.01, seed: 0, rubric: true }
    }
}

pub fn validate_sets(sets: &[AnnotationSet]) -> Result<(), ServiceError> {
    let mut memes = BTreeSet::new();
    for s in sets {
        if !memes.insert(s.meme_id.as_str()) {
            return Err(ServiceError::Validation(format!("meme {} listed twice", s.meme_id)));
        }
        let ids: BTreeSet<&str> = s.candidates.iter().map(|c| c.id.as_str()).collect();
        let captions: BTreeSet<&str> = s.candidates.iter().map(|c| c.caption.as_str()).collect();
        if s.candidates.len() < 2 || ids.len() != s.candidates.len() || captions.len() != s.candidates.len() {
            return Err(ServiceError::Validation(format!("meme {} needs at least two distinct candidates", s.meme_id)));
        }
    }
    Ok(())
}

/// Indices of the sampled sets, in corpus order.
pub fn sample_sets(n: usize, cfg: &QueueConfig) -> Result<Vec<usize>, ServiceError> {
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(ServiceError::Validation(format!("annotation fraction {} outside (0, 1]", cfg.fraction)));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let take = ((cfg.fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, take).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub fn pair_task_id(meme: &str, a: &str, b: &str) -> String {
    format!("{meme}/pair/{a}/{b}")
}

pub fn rubric_task_id(meme: &str, candidate: &str) -> String {
    format!("{meme}/rubric/{candidate}")
}

/// Tasks in serving order: per sampled set, one pair task per unordered
/// candidate pair, then the rubric tasks.
pub fn build_queue(sets: &[AnnotationSet], cfg: &QueueConfig, criteria: &[Criterion]) -> Result<Vec<AnnotationTask>, ServiceError> {
    validate_sets(sets)?;
    let mut tasks = Vec::new();
    for i in sample_sets(sets.len(), cfg)? {
        let s = &sets[i];
        let image_url = format!("/memes/{}/image", s.meme_id);
        for a in 0..s.candidates.len() {
            for b in a + 1..s.candidates.len() {
                let (ca, cb) = (&s.candidates[a], &s.candidates[b]);
                tasks.push(AnnotationTask {
                    id: pair_task_id(&s.meme_id, &ca.id, &cb.id),
                    kind: TaskKind::Pair,
                    meme_id: s.meme_id.clone(),
                    image_url: image_url.clone(),
                    captions: vec![ca.clone(), cb.clone()],
                    criteria: Vec::new(),
                    annotator: None,
                });
            }
        }
        if cfg.rubric {
            for c in &s.candidates {
                tasks.push(AnnotationTask {
                    id: rubric_task_id(&s.meme_id, &c.id),
                    kind: TaskKind::Rubric,
                    meme_id: s.meme_id.clone(),
                    image_url: image_url.clone(),
                    captions: vec![c.clone()],
                    criteria: if criteria.is_empty() { default_criteria() } else { criteria.to_vec() },
                    annotator: None,
                });
            }
        }
    }
    Ok(tasks)
}
