//! CSV schemas and writers for evaluation artifacts.
//!
//! - `episodes.csv`: task, arm, config_id, run, outcome, steps, mean_lambda
//! - `summary.csv`: task, arm, success_rate_pct, n_episodes, seed
//! - `lambda_traces.csv`: per-sampler-step guidance scales for plotting

use std::collections::BTreeMap;
use std::path::Path;

use failsteer_core::env::{Outcome, TaskId};
use failsteer_core::eval::EpisodeResult;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub task: String,
    pub arm: String,
    pub config_id: u64,
    pub run: u64,
    pub outcome: String,
    pub steps: usize,
    pub mean_lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub arm: String,
    pub success_rate_pct: f64,
    pub n_episodes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRowOut {
    pub task: String,
    pub arm: String,
    pub config_id: u64,
    pub run: u64,
    pub chunk_index: usize,
    pub step_index: usize,
    pub lambda: f64,
    pub cosine: f64,
}

fn outcome_name(outcome: Outcome) -> &'static str {
    match outcome {
        Outcome::Running => "running",
        Outcome::Success => "success",
        Outcome::Failure => "failure",
    }
}

pub fn episode_rows(task: TaskId, arm: &str, results: &[EpisodeResult]) -> Vec<EpisodeRow> {
    results
        .iter()
        .map(|r| EpisodeRow {
            task: task.name().into(),
            arm: arm.into(),
            config_id: r.config_id,
            run: r.run,
            outcome: outcome_name(r.outcome).into(),
            steps: r.steps,
            mean_lambda: r.mean_lambda,
        })
        .collect()
}

pub fn trace_rows(task: TaskId, arm: &str, results: &[EpisodeResult]) -> Vec<TraceRowOut> {
    let mut out = Vec::new();
    for r in results {
        for t in &r.trace {
            out.push(TraceRowOut {
                task: task.name().into(),
                arm: arm.into(),
                config_id: r.config_id,
                run: r.run,
                chunk_index: t.chunk_index,
                step_index: t.step_index,
                lambda: t.lambda,
                cosine: t.cosine,
            });
        }
    }
    out
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> LabResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(LabError::io(path))?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> LabResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize::<T>() {
        out.push(rec?);
    }
    Ok(out)
}

/// Independent success-rate recount from episode rows, keyed by
/// `(task, arm)`.
pub fn recount_success_rates(rows: &[EpisodeRow]) -> BTreeMap<(String, String), f64> {
    let mut tally: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for row in rows {
        let e = tally
            .entry((row.task.clone(), row.arm.clone()))
            .or_insert((0, 0));
        e.1 += 1;
        if row.outcome == "success" {
            e.0 += 1;
        }
    }
    tally
        .into_iter()
        .map(|(k, (wins, n))| (k, 100.0 * wins as f64 / n as f64))
        .collect()
}
