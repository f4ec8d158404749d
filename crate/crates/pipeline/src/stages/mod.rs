//! Stage dispatch.

pub mod annotate;
pub mod common;
pub mod corpus;
pub mod report;
pub mod training;

use std::path::PathBuf;

use crate::workspace::{RunManifest, StageRun, Workspace};
use crate::{Result, Stage};

#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    /// annotate-serve: write the exports from the stored responses and exit.
    pub export_only: bool,
    /// evaluate: another report (or its directory) to compare against.
    pub compare: Option<PathBuf>,
    /// evaluate: compare even when the config hashes differ.
    pub force: bool,
}

pub fn run_stage(ws: &Workspace, stage: Stage, opts: &StageOptions) -> Result<RunManifest> {
    // the response log lives in the stage directory and must survive reruns
    let clear = stage != Stage::AnnotateServe;
    let mut run = StageRun::begin(ws, stage, clear)?;
    match stage {
        Stage::Ingest => corpus::ingest(&mut run)?,
        Stage::Segment => corpus::segment(&mut run)?,
        Stage::Augment => corpus::augment(&mut run)?,
        Stage::Align => training::align(&mut run)?,
        Stage::Sft => training::sft(&mut run)?,
        Stage::Candidates => training::candidates(&mut run)?,
        Stage::AnnotateServe => annotate::annotate_serve(&mut run, opts)?,
        Stage::TrainReward => training::train_reward(&mut run)?,
        Stage::Rl => training::rl(&mut run)?,
        Stage::Evaluate => report::evaluate(&mut run, opts)?,
        Stage::Heatmap => report::heatmap(&mut run)?,
    }
    run.finish()
}

/// Every stage in order except the interactive annotation service; reward
/// training then uses whatever human preferences already exist.
pub fn run_pipeline(ws: &Workspace, opts: &StageOptions) -> Result<Vec<RunManifest>> {
    Stage::ALL
        .into_iter()
        .filter(|s| *s != Stage::AnnotateServe)
        .map(|s| run_stage(ws, s, opts))
        .collect()
}
