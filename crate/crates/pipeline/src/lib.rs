//! Stage-by-stage orchestration of the caption pipeline: corpus ingestion,
//! segmentation, feature extraction, alignment, supervised fine-tuning,
//! candidate generation, annotation, reward training, RL refinement,
//! evaluation and heatmaps. Each stage reads its inputs from the artifact
//! root, writes its outputs under `<root>/<stage>/` and records a
//! `run.json` manifest.

pub mod config;
pub mod grid;
pub mod stages;
pub mod synth;
pub mod workspace;

use std::fmt;
use std::path::PathBuf;

pub use config::Config;
pub use stages::{run_pipeline, run_stage, StageOptions};
pub use workspace::Workspace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Segment,
    Augment,
    Align,
    Sft,
    Candidates,
    AnnotateServe,
    TrainReward,
    Rl,
    Evaluate,
    Heatmap,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Ingest,
        Stage::Segment,
        Stage::Augment,
        Stage::Align,
        Stage::Sft,
        Stage::Candidates,
        Stage::AnnotateServe,
        Stage::TrainReward,
        Stage::Rl,
        Stage::Evaluate,
        Stage::Heatmap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Segment => "segment",
            Stage::Augment => "augment",
            Stage::Align => "align",
            Stage::Sft => "sft",
            Stage::Candidates => "candidates",
            Stage::AnnotateServe => "annotate-serve",
            Stage::TrainReward => "train-reward",
            Stage::Rl => "rl",
            Stage::Evaluate => "evaluate",
            Stage::Heatmap => "heatmap",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage} needs {} which does not exist; run `{run_first}` first", path.display())]
    MissingArtifact { stage: Stage, run_first: Stage, path: PathBuf },
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] memecap_core::Error),
    #[error(transparent)]
    Annotate(#[from] memecap_annotate::ServiceError),
}

impl PipelineError {
    /// 2 for a missing upstream artifact, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingArtifact { .. } => 2,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for PipelineError {
    fn from(e: serde_json::Error) -> Self {
        PipelineError::Core(e.into())
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
