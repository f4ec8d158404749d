use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use memecap_core::reward::PreferenceRecord;
use serde::{Deserialize, Serialize};

use crate::export::{export_preferences, export_rubric, set_progress, DEFAULT_MIN_ANNOTATORS};
use crate::model::{AnnotationResponse, AnnotationSet, AnnotationTask, Criterion, Progress, RubricSummary, TaskKind};
use crate::queue::{build_queue, QueueConfig};
use crate::store::ResponseStore;
use crate::ServiceError;

pub const ANNOTATOR_HEADER: &str = "x-annotator-id";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub annotators: Vec<String>,
    pub queue: QueueConfig,
    pub min_annotators: usize,
    pub compact_every: usize,
    /// Rubric wording; empty means the built-in descriptions.
    pub criteria: Vec<Criterion>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            annotators: Vec::new(),
            queue: QueueConfig::default(),
            min_annotators: DEFAULT_MIN_ANNOTATORS,
            compact_every: 256,
            criteria: Vec::new(),
        }
    }
}

struct Log {
    store: ResponseStore,
    responses: Vec<AnnotationResponse>,
    answered: HashSet<(String, String)>,
}

pub struct Service {
    tasks: Vec<AnnotationTask>,
    task_index: HashMap<String, usize>,
    images: BTreeMap<String, PathBuf>,
    annotators: BTreeSet<String>,
    min_annotators: usize,
    log: Mutex<Log>,
}

impl Service {
    /// Builds the task queue and replays the response log at `store_path`.
    pub fn open(sets: &[AnnotationSet], cfg: &ServiceConfig, store_path: impl Into<PathBuf>) -> Result<Service, ServiceError> {
        if cfg.annotators.iter().any(|a| a.trim().is_empty()) {
            return Err(ServiceError::Validation("annotator ids must be non-empty".into()));
        }
        let tasks = build_queue(sets, &cfg.queue, &cfg.criteria)?;
        let task_index: HashMap<String, usize> = tasks.iter().enumerate().map(|(i, t)| (t.id.clone(), i)).collect();
        let (store, responses) = ResponseStore::open(store_path, cfg.compact_every)?;
        let mut answered = HashSet::new();
        for r in &responses {
            if !task_index.contains_key(&r.task_id) {
                return Err(ServiceError::Validation(format!("stored response for unknown task {}", r.task_id)));
            }
            if !answered.insert((r.task_id.clone(), r.annotator_id.clone())) {
                return Err(ServiceError::Validation(format!("stored responses repeat {} / {}", r.task_id, r.annotator_id)));
            }
        }
        Ok(Service {
            tasks,
            task_index,
            images: sets.iter().map(|s| (s.meme_id.clone(), s.image.clone())).collect(),
            annotators: cfg.annotators.iter().cloned().collect(),
            min_annotators: cfg.min_annotators,
            log: Mutex::new(Log { store, responses, answered }),
        })
    }

    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.tasks
    }

    fn check_annotator(&self, id: &str) -> Result<(), ServiceError> {
        if self.annotators.contains(id) {
            Ok(())
        } else {
            Err(ServiceError::UnknownAnnotator(id.into()))
        }
    }

    fn snapshot(&self) -> Vec<AnnotationResponse> {
        self.log.lock().unwrap().responses.clone()
    }

    /// Oldest task this annotator has not answered.
    pub fn next_task(&self, annotator: &str) -> Result<Option<AnnotationTask>, ServiceError> {
        self.check_annotator(annotator)?;
        let log = self.log.lock().unwrap();
        Ok(self.tasks.iter().find(|t| !log.answered.contains(&(t.id.clone(), annotator.to_string()))).map(|t| AnnotationTask {
            annotator: Some(annotator.to_string()),
            ..t.clone()
        }))
    }

    /// Validates, appends durably, then acknowledges with the stored form.
    pub fn submit(&self, mut r: AnnotationResponse) -> Result<AnnotationResponse, ServiceError> {
        self.check_annotator(&r.annotator_id)?;
        let task = self.task_index.get(&r.task_id).map(|&i| &self.tasks[i]).ok_or_else(|| ServiceError::UnknownTask(r.task_id.clone()))?;
        match (task.kind, r.winner, r.scores) {
            (TaskKind::Pair, Some(_), None) => {}
            (TaskKind::Rubric, None, Some(s)) => {
                if let Some(v) = s.iter().find(|v| !(1..=5).contains(*v)) {
                    return Err(ServiceError::Validation(format!("rubric score {v} outside 1..=5")));
                }
            }
            (TaskKind::Pair, ..) => return Err(ServiceError::Validation("a pair task takes a winner and no scores".into())),
            (TaskKind::Rubric, ..) => return Err(ServiceError::Validation("a rubric task takes four scores and no winner".into())),
        }
        if r.timestamp.is_none() {
            r.timestamp = Some(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true));
        }
        let mut log = self.log.lock().unwrap();
        let key = (r.task_id.clone(), r.annotator_id.clone());
        if log.answered.contains(&key) {
            return Err(ServiceError::Conflict { task: key.0, annotator: key.1 });
        }
        log.store.append(&r)?;
        log.answered.insert(key);
        log.responses.push(r.clone());
        if log.store.due_for_compaction() {
            let Log { store, responses, .. } = &mut *log;
            store.compact(responses)?;
        }
        Ok(r)
    }

    pub fn responses_for(&self, task_id: &str) -> Result<Vec<AnnotationResponse>, ServiceError> {
        if !self.task_index.contains_key(task_id) {
            return Err(ServiceError::UnknownTask(task_id.into()));
        }
        Ok(self.snapshot().into_iter().filter(|r| r.task_id == task_id).collect())
    }

    pub fn export_preferences(&self, min_annotators: Option<usize>) -> Result<Vec<PreferenceRecord>, ServiceError> {
        export_preferences(&self.tasks, &self.snapshot(), min_annotators.unwrap_or(self.min_annotators))
    }

    pub fn export_rubric(&self) -> Result<Vec<RubricSummary>, ServiceError> {
        export_rubric(&self.tasks, &self.snapshot())
    }

    /// Counts for one annotator, or over every annotator × task slot.
    pub fn progress(&self, annotator: Option<&str>) -> Result<Progress, ServiceError> {
        let responses = self.snapshot();
        let (total, completed) = match annotator {
            Some(a) => {
                self.check_annotator(a)?;
                (self.tasks.len(), responses.iter().filter(|r| r.annotator_id == a).count())
            }
            None => (self.tasks.len() * self.annotators.len(), responses.len()),
        };
        let (pending_sets, ready_sets) = set_progress(&self.tasks, &responses, self.min_annotators);
        Ok(Progress {
            annotator: annotator.map(String::from),
            total,
            completed,
            remaining: total.saturating_sub(completed),
            pending_sets,
            ready_sets,
        })
    }

    pub fn image(&self, meme_id: &str) -> Result<(Vec<u8>, &'static str), ServiceError> {
        let path = self.images.get(meme_id).ok_or_else(|| ServiceError::UnknownMeme(meme_id.into()))?;
        let bytes = std::fs::read(path).map_err(|e| ServiceError::Core(memecap_core::Error::io(path, e)))?;
        let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("jpg" | "jpeg") => "image/jpeg",
            Some("gif") => "image/gif",
            Some("webp") => "image/webp",
            _ => "image/png",
        };
        Ok((bytes, mime))
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownAnnotator(_) | ServiceError::UnknownTask(_) | ServiceError::UnknownMeme(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict { .. } => StatusCode::CONFLICT,
            ServiceError::Validation(_) | ServiceError::MissingAnnotator => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Core(memecap_core::Error::Validation(_) | memecap_core::Error::Record { .. }) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{self}");
        }
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct AnnotatorQuery {
    annotator: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    min_annotators: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct TaskQuery {
    task_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextTask {
    pub task: Option<AnnotationTask>,
}

fn annotator_of(q: &AnnotatorQuery, headers: &HeaderMap) -> Option<String> {
    q.annotator.clone().or_else(|| headers.get(ANNOTATOR_HEADER).and_then(|v| v.to_str().ok()).map(String::from))
}

async fn next_task(State(s): State<Arc<Service>>, Query(q): Query<AnnotatorQuery>, headers: HeaderMap) -> Result<Json<NextTask>, ServiceError> {
    let who = annotator_of(&q, &headers).ok_or(ServiceError::MissingAnnotator)?;
    Ok(Json(NextTask { task: s.next_task(&who)? }))
}

async fn submit(State(s): State<Arc<Service>>, Json(r): Json<AnnotationResponse>) -> Result<Json<AnnotationResponse>, ServiceError> {
    // the store fsyncs; keep that off the async workers
    let stored = tokio::task::spawn_blocking(move || s.submit(r))
        .await
        .map_err(|e| ServiceError::Validation(format!("submission aborted: {e}")))??;
    Ok(Json(stored))
}

async fn responses(State(s): State<Arc<Service>>, Query(q): Query<TaskQuery>) -> Result<Json<Vec<AnnotationResponse>>, ServiceError> {
    Ok(Json(s.responses_for(&q.task_id)?))
}

async fn export_prefs(State(s): State<Arc<Service>>, Query(q): Query<ExportQuery>) -> Result<Json<Vec<PreferenceRecord>>, ServiceError> {
    Ok(Json(s.export_preferences(q.min_annotators)?))
}

async fn export_rubric_scores(State(s): State<Arc<Service>>) -> Result<Json<Vec<RubricSummary>>, ServiceError> {
    Ok(Json(s.export_rubric()?))
}

async fn progress(State(s): State<Arc<Service>>, Query(q): Query<AnnotatorQuery>, headers: HeaderMap) -> Result<Json<Progress>, ServiceError> {
    Ok(Json(s.progress(annotator_of(&q, &headers).as_deref())?))
}

async fn image(State(s): State<Arc<Service>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let (bytes, mime) = s.image(&id)?;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/tasks/next", get(next_task))
        .route("/responses", post(submit).get(responses))
        .route("/export/preferences", get(export_prefs))
        .route("/export/rubric", get(export_rubric_scores))
        .route("/progress", get(progress))
        .route("/memes/{id}/image", get(image))
        .with_state(service)
}

/// Serves until the listener fails.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}
