//! annotate-serve: the preference collection service over the candidate sets.

use std::net::SocketAddr;
use std::sync::Arc;

use memecap_annotate::{serve, AnnotationSet, Service, ServiceConfig};
use memecap_annotate::queue::QueueConfig;

use super::common::*;
use super::StageOptions;
use crate::workspace::{read_text, StageRun};
use crate::{PipelineError, Result, Stage};

pub const RESPONSES: &str = "responses.jsonl";

pub fn open_service(run: &mut StageRun) -> Result<Service> {
    let path = run.input(Stage::Candidates, ANNOTATION_SETS)?;
    let mut sets: Vec<AnnotationSet> = serde_json::from_str(&read_text(&path)?)?;
    for s in sets.iter_mut() {
        if s.image.is_relative() {
            s.image = run.ws.root().join(&s.image);
        }
    }
    let cfg = &run.ws.config.stage.annotate;
    let service_cfg = ServiceConfig {
        annotators: cfg.annotators.clone(),
        queue: QueueConfig { fraction: cfg.fraction, seed: run.ws.seed_for(Stage::AnnotateServe), rubric: cfg.rubric },
        min_annotators: cfg.min_annotators,
        ..ServiceConfig::default()
    };
    Ok(Service::open(&sets, &service_cfg, run.path(RESPONSES))?)
}

fn export(run: &mut StageRun, service: &Service) -> Result<()> {
    let prefs = service.export_preferences(None)?;
    let rubric = service.export_rubric()?;
    run.write_jsonl(HUMAN_PREFERENCES, &prefs)?;
    run.write_json("rubric.json", &rubric)?;
    let responses = run.path(RESPONSES);
    if responses.exists() {
        run.record(&responses)?;
    }
    log::info!("annotate-serve: exported {} agreed orderings and {} rubric summaries", prefs.len(), rubric.len());
    Ok(())
}

pub fn annotate_serve(run: &mut StageRun, opts: &StageOptions) -> Result<()> {
    let service = Arc::new(open_service(run)?);
    log::info!("annotate-serve: {} tasks", service.tasks().len());
    if !opts.export_only {
        let addr: SocketAddr = run
            .ws
            .config
            .stage
            .annotate
            .addr
            .parse()
            .map_err(|e| PipelineError::Config(format!("annotate-serve.addr: {e}")))?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(run.ws.workers.max(2))
            .enable_all()
            .build()
            .map_err(|e| PipelineError::Validation(format!("cannot start the async runtime: {e}")))?;
        let svc = service.clone();
        runtime.block_on(async move {
            tokio::select! {
                r = serve(svc, addr) => r.map_err(|e| PipelineError::Validation(format!("annotation server on {addr}: {e}"))),
                _ = tokio::signal::ctrl_c() => {
                    log::info!("annotate-serve: interrupted, exporting");
                    Ok(())
                }
            }
        })?;
    }
    export(run, &service)
}
