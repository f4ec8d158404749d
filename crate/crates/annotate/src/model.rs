use std::path::PathBuf;

use serde::{Deserialize, Serialize};

/// One meme's candidate captions as shown to annotators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub meme_id: String,
    pub image: PathBuf,
    pub candidates: Vec<CandidateText>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateText {
    pub id: String,
    pub caption: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Pair,
    Rubric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub description: String,
}

/// Short descriptions of the four rating dimensions. Deployments that need
/// different wording load their own list.
pub fn default_criteria() -> Vec<Criterion> {
    [
        ("informativeness", "1: adds no context to the image. 5: gives rich context that changes how the image reads."),
        ("relevance", "1: unrelated to the image. 5: fits the image closely and sharpens its point."),
        ("creativity", "1: stock phrasing. 5: original and witty."),
        ("humor", "1: not funny. 5: very funny and memorable."),
    ]
    .into_iter()
    .map(|(n, d)| Criterion { name: n.into(), description: d.into() })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub id: String,
    pub kind: TaskKind,
    pub meme_id: String,
    pub image_url: String,
    /// Two captions for a pair task, one for a rubric task.
    pub captions: Vec<CandidateText>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub criteria: Vec<Criterion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub task_id: String,
    pub annotator_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub winner: Option<Winner>,
    /// Informativeness, relevance, creativity, humor; each 1–5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<[u8; 4]>,
    /// Filled in by the service when the client leaves it out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
    pub total: usize,
    pub completed: usize,
    pub remaining: usize,
    /// Sets with some but fewer than the required complete annotators.
    pub pending_sets: usize,
    /// Sets with enough complete annotators to be considered for export.
    pub ready_sets: usize,
}

/// Mean scaled rubric scores of one caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricSummary {
    pub meme_id: String,
    pub candidate_id: String,
    pub scores: [f64; 4],
    pub annotator_ids: Vec<String>,
}
