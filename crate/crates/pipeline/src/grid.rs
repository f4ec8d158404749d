//! Grid search over the SFT loss weights and the RL weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::GridSpec;
use crate::stages::report::{read_summary_line, summary_metrics};
use crate::stages::{common::REPORT, run_stage, StageOptions};
use crate::{PipelineError, Result, Stage, Workspace};

/// Names an objective may take: columns of the `all` summary row.
pub const METRICS: [&str; 11] =
    ["Info", "Rele", "Crea", "Humo", "HAverage", "BLEU", "ROUGE", "CIDEr", "METEOR", "MAverage", "Average"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    /// `[ori, g, t]`
    pub lambdas: [f64; 3],
    /// `[w1, w2]`
    pub rl_weights: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: GridPoint,
    pub metrics: BTreeMap<String, f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub objective: String,
    pub best: usize,
    pub rows: Vec<GridRow>,
}

impl GridResult {
    pub fn best_point(&self) -> GridPoint {
        self.rows[self.best].point
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("lambda_ori,lambda_g,lambda_t,w1,w2,{},best\n", self.objective);
        for (i, r) in self.rows.iter().enumerate() {
            let [o, g, t] = r.point.lambdas;
            let [w1, w2] = r.point.rl_weights;
            out.push_str(&format!("{o},{g},{t},{w1},{w2},{:.4},{}\n", r.objective, i == self.best));
        }
        out
    }
}

/// Evaluates every point in `spec` order, lambdas outermost, and keeps the
/// highest objective; the first point wins a tie.
pub fn grid_search(spec: &GridSpec, mut evaluate: impl FnMut(&GridPoint) -> Result<BTreeMap<String, f64>>) -> Result<GridResult> {
    spec.validate()?;
    if !METRICS.contains(&spec.objective.as_str()) {
        return Err(PipelineError::Config(format!(
            "unknown grid objective {:?}; expected one of {}",
            spec.objective,
            METRICS.join(", ")
        )));
    }
    let mut rows = Vec::new();
    for lambdas in &spec.lambdas {
        for rl_weights in &spec.rl_weights {
            let point = GridPoint { lambdas: *lambdas, rl_weights: *rl_weights };
            let metrics = evaluate(&point)?;
            let objective = *metrics.get(&spec.objective).ok_or_else(|| {
                PipelineError::Validation(format!("the report has no {} value; human scores are needed for it", spec.objective))
            })?;
            if !objective.is_finite() {
                return Err(PipelineError::Validation(format!("{} is not finite at {point:?}", spec.objective)));
            }
            rows.push(GridRow { point, metrics, objective });
        }
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.objective > rows[best].objective {
            best = i;
        }
    }
    Ok(GridResult { objective: spec.objective.clone(), best, rows })
}

/// Runs the grid on the pipeline: SFT, candidates and reward training once per
/// lambda triple under `grid/l{i}`, then RL and evaluation per RL weight pair
/// under `grid/l{i}-w{j}`. Earlier stages are read from the workspace root.
pub fn run_grid(ws: &Workspace) -> Result<GridResult> {
    let spec = ws.config.grid.clone();
    let base = ws.root().join("grid");
    let mut sft_done = std::collections::BTreeSet::new();
    let index_of = |p: &GridPoint| {
        let i = spec.lambdas.iter().position(|l| *l == p.lambdas).expect("point from the grid");
        let j = spec.rl_weights.iter().position(|w| *w == p.rl_weights).expect("point from the grid");
        (i, j)
    };
    let result = grid_search(&spec, |point| {
        let (i, j) = index_of(point);
        let mut cfg = ws.config.clone();
        [cfg.stage.sft.lambda_ori, cfg.stage.sft.lambda_g, cfg.stage.sft.lambda_t] = point.lambdas;
        [cfg.stage.rl.w1, cfg.stage.rl.w2] = point.rl_weights;
        let lam = base.join(format!("l{i}"));
        let run = base.join(format!("l{i}-w{j}"));
        let mut point_ws = Workspace::at(cfg, ws.root(), ws.workers);
        for s in [Stage::Sft, Stage::Candidates, Stage::TrainReward] {
            point_ws = point_ws.with_stage_dir(s, lam.join(s.as_str()));
        }
        for s in [Stage::Rl, Stage::Evaluate] {
            point_ws = point_ws.with_stage_dir(s, run.join(s.as_str()));
        }
        if sft_done.insert(i) {
            for s in [Stage::Sft, Stage::Candidates, Stage::TrainReward] {
                run_stage(&point_ws, s, &StageOptions::default())?;
            }
        }
        for s in [Stage::Rl, Stage::Evaluate] {
            run_stage(&point_ws, s, &StageOptions::default())?;
        }
        let metrics = summary_metrics(&read_summary_line(&point_ws.dir(Stage::Evaluate).join(REPORT))?)?;
        log::info!("grid {point:?}: {} = {:?}", spec.objective, metrics.get(&spec.objective));
        Ok(metrics)
    })?;
    std::fs::create_dir_all(&base).map_err(|e| crate::workspace::io_err(&base, e))?;
    let csv = base.join("results.csv");
    std::fs::write(&csv, result.to_csv()).map_err(|e| crate::workspace::io_err(&csv, e))?;
    let best = base.join("best.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "config_hash": ws.config_hash(),
        "objective": result.objective,
        "best": result.best_point(),
        "value": result.rows[result.best].objective,
    }))?;
    std::fs::write(&best, text + "\n").map_err(|e| crate::workspace::io_err(&best, e))?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted(p: &GridPoint) -> Result<BTreeMap<String, f64>> {
        // favours a larger weight on the token-level term, mildly prefers w1 = 0.4
        let v = 100.0 * p.lambdas[2] - (p.rl_weights[0] - 0.4).abs();
        Ok([("Average".to_string(), v), ("BLEU".to_string(), -v)].into())
    }

    #[test]
    fn picks_the_planted_optimum() {
        let r = grid_search(&GridSpec::default(), planted).unwrap();
        assert_eq!(r.rows.len(), 9);
        assert_eq!(r.best_point(), GridPoint { lambdas: [0.4, 0.2, 0.4], rl_weights: [0.4, 0.6] });
        let spec = GridSpec { objective: "BLEU".into(), ..GridSpec::default() };
        assert_eq!(grid_search(&spec, planted).unwrap().best_point().lambdas, [0.6, 0.2, 0.2]);
    }

    #[test]
    fn ties_go_to_the_first_point_and_bad_objectives_fail() {
        let flat = |_: &GridPoint| Ok([("Average".to_string(), 1.0)].into());
        assert_eq!(grid_search(&GridSpec::default(), flat).unwrap().best, 0);
        let spec = GridSpec { objective: "Fun".into(), ..GridSpec::default() };
        assert!(matches!(grid_search(&spec, flat), Err(PipelineError::Config(_))));
        let spec = GridSpec { objective: "HAverage".into(), ..GridSpec::default() };
        assert!(matches!(grid_search(&spec, flat), Err(PipelineError::Validation(_))));
    }
}
