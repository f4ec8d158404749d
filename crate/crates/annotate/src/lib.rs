//! Annotation service: hands out pairwise and rubric tasks over sampled
//! candidate sets, keeps every response in an append-only log and exports
//! agreed human preferences for reward training.

pub mod export;
pub mod model;
pub mod queue;
pub mod service;
pub mod store;

pub use model::{AnnotationResponse, AnnotationSet, AnnotationTask, CandidateText, Progress, TaskKind, Winner};
pub use service::{router, serve, Service, ServiceConfig};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown annotator {0}")]
    UnknownAnnotator(String),
    #[error("no annotator id given")]
    MissingAnnotator,
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unknown meme {0}")]
    UnknownMeme(String),
    #[error("{annotator} already answered {task}")]
    Conflict { task: String, annotator: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] memecap_core::Error),
}
