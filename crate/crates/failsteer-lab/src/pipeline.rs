//! The staged pipeline: (1) success-only baseline on expert demos,
//! (2) failure harvesting from the baseline policy plus replanning-based
//! correction and a success-side fine-tune, (3) joint dual-generator
//! training, then paired evaluation of the four arms.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use failsteer_core::data::{
    build_datasets, collect_rollouts, DataStats, Dataset, TrajOutcome, Trajectory,
};
use failsteer_core::env::correct::replan_correction;
use failsteer_core::env::TaskId;
use failsteer_core::eval::{evaluate, success_rate_pct, EpisodeResult};
use failsteer_core::guidance::GuidanceSpec;
use failsteer_core::model::DagModel;
use failsteer_core::policy::{ExpertPolicy, GenerativePolicy, NoisyExpertPolicy};
use failsteer_core::rng::derive_seed;
use failsteer_core::train::{train_dag, train_success_only, DagTrainLog, TrainLog};
use serde::Serialize;

use crate::checkpoint::{load_model, save_model};
use crate::config::RunConfig;
use crate::csvio::{episode_rows, trace_rows, write_csv, EpisodeRow, SummaryRow, TraceRowOut};
use crate::dataset_io::{load_dataset, save_dataset};
use crate::error::{LabError, LabResult};

/// Evaluation arms, in report order.
pub const ARMS: [&str; 4] = [
    "success_only",
    "success_correction",
    "static_fil",
    "adaptive_fil",
];

// uid namespaces per collection phase
const UID_DEMOS: u64 = 0;
const UID_ROLLOUTS: u64 = 1_000_000;
const UID_CORRECTED: u64 = 2_000_000;
const UID_TOPUP: u64 = 3_000_000;

// seed-scope tags
const TAG_DEMOS: u64 = 10;
const TAG_ROLLOUTS: u64 = 20;
const TAG_TOPUP: u64 = 21;

pub struct SeedArtifacts {
    pub model1: DagModel,
    pub model2: DagModel,
    pub model3: DagModel,
    pub demos: Dataset,
    pub ds2: Dataset,
    pub df2: Dataset,
    pub log1: TrainLog,
    pub log2: TrainLog,
    pub log3: DagTrainLog,
}

pub fn seed_dir(run_dir: &Path, task: TaskId, seed: u64) -> PathBuf {
    run_dir.join(task.name()).join(format!("seed{seed}"))
}

/// Stage 1: expert demonstrations and the success-only baseline.
pub fn stage1(cfg: &RunConfig, task: TaskId, seed: u64) -> LabResult<(DagModel, Dataset, TrainLog)> {
    let spec = cfg.task_spec(task);
    let mut expert = ExpertPolicy {
        spec: spec.clone(),
        chunk_len: cfg.model.horizon,
    };
    let demo_seed = derive_seed(cfg.run.seed, &[TAG_DEMOS, task.index() as u64, seed]);
    let demos = collect_rollouts(
        &mut expert,
        &spec,
        0..cfg.data.demo_configs,
        cfg.data.demo_runs,
        demo_seed,
        UID_DEMOS,
    )?;
    // normalization statistics are frozen here and ride along every stage
    let stats = DataStats::compute(&demos)?;
    let mut model = DagModel::init(cfg.model_config(task, seed), cfg.gen_config(), stats)?;
    let demos = Dataset::new(demos);
    let log = train_success_only(
        &demos,
        &mut model,
        &cfg.opt_config(cfg.train.stage1_steps, seed, 1),
        cfg.data.failure_chunking,
    )?;
    Ok((model, demos, log))
}

/// Stage 2: roll the baseline to harvest failures, correct what the planner
/// can recover, fine-tune the success side on demos + corrections.
pub struct Stage2Out {
    pub model2: DagModel,
    pub ds2: Dataset,
    pub df2: Dataset,
    pub log2: TrainLog,
    pub rollouts: Vec<Trajectory>,
}

pub fn stage2(
    cfg: &RunConfig,
    task: TaskId,
    seed: u64,
    model1: &DagModel,
    demos: &Dataset,
) -> LabResult<Stage2Out> {
    let spec = cfg.task_spec(task);
    let collect_seed = derive_seed(cfg.run.seed, &[TAG_ROLLOUTS, task.index() as u64, seed]);
    let mut policy = GenerativePolicy {
        model: model1,
        guidance: GuidanceSpec::none(),
        task_index: task.index(),
    };
    let rollouts = collect_rollouts(
        &mut policy,
        &spec,
        0..cfg.data.rollout_configs,
        cfg.data.rollout_runs,
        collect_seed,
        UID_ROLLOUTS,
    )?;

    let mut failures: Vec<Trajectory> = rollouts
        .iter()
        .filter(|t| t.outcome == TrajOutcome::Failure)
        .take(cfg.data.max_failures)
        .cloned()
        .collect();

    // bootstrap fallback: top up scarce failures with the noisy expert
    let mut block = 0u64;
    while failures.len() < cfg.data.min_failures && block < 10 {
        let mut noisy = NoisyExpertPolicy {
            inner: ExpertPolicy {
                spec: spec.clone(),
                chunk_len: cfg.model.horizon,
            },
            sigma: cfg.data.noisy_sigma,
        };
        let topup_seed =
            derive_seed(cfg.run.seed, &[TAG_TOPUP, task.index() as u64, seed, block]);
        let lo = 100_000 + block * 32;
        let extra = collect_rollouts(
            &mut noisy,
            &spec,
            lo..lo + 32,
            1,
            topup_seed,
            UID_TOPUP + block * 1000,
        )?;
        failures.extend(
            extra
                .into_iter()
                .filter(|t| t.outcome == TrajOutcome::Failure)
                .take(cfg.data.min_failures.saturating_sub(failures.len())),
        );
        block += 1;
    }

    let mut corrected = Vec::new();
    for (i, f) in failures.iter().enumerate() {
        if corrected.len() >= cfg.data.max_corrected {
            break;
        }
        if let Ok(c) = replan_correction(f, &spec, UID_CORRECTED + i as u64) {
            corrected.push(c);
        }
    }

    let mut all = demos.trajectories.clone();
    all.extend(corrected);
    all.extend(failures);
    let (ds2, df2, _union_stats) = build_datasets(all)?;

    // warm start; the stage-1 normalization stats stay frozen
    let mut model2 = model1.clone();
    let mut opt2 = cfg.opt_config(cfg.train.stage2_steps, seed, 2);
    opt2.lr = cfg.train.stage2_lr.unwrap_or(cfg.train.lr);
    let log2 = train_success_only(&ds2, &mut model2, &opt2, cfg.data.failure_chunking)?;
    Ok(Stage2Out {
        model2,
        ds2,
        df2,
        log2,
        rollouts,
    })
}

/// Stage 3: joint dual-generator training. Trunk and success head continue
/// from stage 2; the failure head is still at its initialization.
pub fn stage3(
    cfg: &RunConfig,
    seed: u64,
    model2: &DagModel,
    ds2: &Dataset,
    df2: &Dataset,
) -> LabResult<(DagModel, DagTrainLog)> {
    let mut model3 = model2.clone();
    let mut opt3 = cfg.opt_config(cfg.train.stage3_steps, seed, 3);
    opt3.lr = cfg.train.stage3_lr.unwrap_or(cfg.train.lr);
    let log3 = train_dag(ds2, df2, &mut model3, &opt3, cfg.data.failure_chunking)?;
    Ok((model3, log3))
}

pub fn train_stages(cfg: &RunConfig, task: TaskId, seed: u64) -> LabResult<SeedArtifacts> {
    let (model1, demos, log1) = stage1(cfg, task, seed)?;
    let s2 = stage2(cfg, task, seed, &model1, &demos)?;
    let (model3, log3) = stage3(cfg, seed, &s2.model2, &s2.ds2, &s2.df2)?;
    Ok(SeedArtifacts {
        model1,
        model2: s2.model2,
        model3,
        demos,
        ds2: s2.ds2,
        df2: s2.df2,
        log1,
        log2: s2.log2,
        log3,
    })
}

/// Guidance applied by each evaluation arm.
pub fn arm_spec(cfg: &RunConfig, arm: &str) -> LabResult<GuidanceSpec> {
    let mut spec = match arm {
        "success_only" | "success_correction" => GuidanceSpec::none(),
        "static_fil" => GuidanceSpec::static_fi(cfg.guidance.static_lambda),
        "adaptive_fil" => GuidanceSpec::adaptive_fi(cfg.guidance.alpha),
        other => return Err(LabError::Config(format!("unknown arm {other:?}"))),
    };
    spec.cos_floor = cfg.guidance.cos_floor;
    Ok(spec)
}

fn arm_model<'a>(artifacts: &'a SeedArtifacts, arm: &str) -> &'a DagModel {
    match arm {
        "success_only" => &artifacts.model1,
        "success_correction" => &artifacts.model2,
        _ => &artifacts.model3,
    }
}

/// Evaluate one checkpoint under one guidance spec over the configured
/// evaluation grid. Episode seeds depend only on (task, config, run), so
/// arms sharing `eval_seed` are paired.
pub fn evaluate_arm(
    cfg: &RunConfig,
    task: TaskId,
    model: &DagModel,
    guidance: GuidanceSpec,
    eval_seed: u64,
) -> LabResult<Vec<EpisodeResult>> {
    let spec = cfg.task_spec(task);
    let mut policy = GenerativePolicy {
        model,
        guidance,
        task_index: task.index(),
    };
    let lo = cfg.eval.config_offset;
    Ok(evaluate(
        &mut policy,
        &spec,
        lo..lo + cfg.eval.configs,
        cfg.eval.runs,
        eval_seed,
    )?)
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct DagLossRow {
    step: usize,
    success_loss: f64,
    failure_loss: f64,
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> LabResult<()> {
    let rows: Vec<LossRow> = losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRow { step, loss })
        .collect();
    write_csv(path, &rows)
}

pub fn persist_artifacts(dir: &Path, a: &SeedArtifacts) -> LabResult<()> {
    save_model(&dir.join("stage1.ckpt.json"), &a.model1)?;
    save_model(&dir.join("stage2.ckpt.json"), &a.model2)?;
    save_model(&dir.join("stage3.ckpt.json"), &a.model3)?;
    save_dataset(&dir.join("demos.jsonl"), &a.demos.trajectories)?;
    save_dataset(&dir.join("dataset_success.jsonl"), &a.ds2.trajectories)?;
    save_dataset(&dir.join("dataset_failure.jsonl"), &a.df2.trajectories)?;
    write_loss_csv(&dir.join("losses_stage1.csv"), &a.log1.losses)?;
    write_loss_csv(&dir.join("losses_stage2.csv"), &a.log2.losses)?;
    let rows: Vec<DagLossRow> = a
        .log3
        .success_losses
        .iter()
        .zip(a.log3.failure_losses.iter())
        .enumerate()
        .map(|(step, (&s, &f))| DagLossRow {
            step,
            success_loss: s,
            failure_loss: f,
        })
        .collect();
    write_csv(&dir.join("losses_stage3.csv"), &rows)?;
    Ok(())
}

pub fn load_artifacts(dir: &Path) -> LabResult<SeedArtifacts> {
    Ok(SeedArtifacts {
        model1: load_model(&dir.join("stage1.ckpt.json"))?,
        model2: load_model(&dir.join("stage2.ckpt.json"))?,
        model3: load_model(&dir.join("stage3.ckpt.json"))?,
        demos: Dataset::new(load_dataset(&dir.join("demos.jsonl"))?),
        ds2: Dataset::new(load_dataset(&dir.join("dataset_success.jsonl"))?),
        df2: Dataset::new(load_dataset(&dir.join("dataset_failure.jsonl"))?),
        log1: TrainLog::default(),
        log2: TrainLog::default(),
        log3: DagTrainLog::default(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub task: String,
    pub arm: String,
    pub mean_success_rate_pct: f64,
    pub n_seeds: usize,
}

pub struct PipelineReport {
    pub summary: Vec<SummaryRow>,
    pub rows: Vec<ReportRow>,
    pub table: String,
}

/// Mean success rate over seeds per (task, arm), in config task order and
/// arm report order, plus a printable table.
pub fn aggregate(cfg: &RunConfig, summary: &[SummaryRow]) -> LabResult<PipelineReport> {
    let tasks = cfg.task_ids()?;
    let mut rows = Vec::new();
    for task in &tasks {
        for arm in ARMS {
            let vals: Vec<f64> = summary
                .iter()
                .filter(|s| s.task == task.name() && s.arm == arm)
                .map(|s| s.success_rate_pct)
                .collect();
            if vals.is_empty() {
                continue;
            }
            rows.push(ReportRow {
                task: task.name().into(),
                arm: arm.into(),
                mean_success_rate_pct: vals.iter().sum::<f64>() / vals.len() as f64,
                n_seeds: vals.len(),
            });
        }
    }

    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<24} {:>20} {:>20} {:>14} {:>14}",
        "task", ARMS[0], ARMS[1], ARMS[2], ARMS[3]
    );
    for task in &tasks {
        let cell = |arm: &str| -> String {
            rows.iter()
                .find(|r| r.task == task.name() && r.arm == arm)
                .map(|r| format!("{:.1}", r.mean_success_rate_pct))
                .unwrap_or_else(|| "-".into())
        };
        let _ = writeln!(
            table,
            "{:<24} {:>20} {:>20} {:>14} {:>14}",
            task.name(),
            cell(ARMS[0]),
            cell(ARMS[1]),
            cell(ARMS[2]),
            cell(ARMS[3])
        );
    }
    Ok(PipelineReport {
        summary: summary.to_vec(),
        rows,
        table,
    })
}

/// Stages 1-3 for every (task, seed), four-arm paired evaluation, and all
/// artifacts under `cfg.run_dir()`. Returns the aggregated report.
pub fn full_pipeline(cfg: &RunConfig) -> LabResult<PipelineReport> {
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir).map_err(LabError::io(&run_dir))?;
    let mut summary: Vec<SummaryRow> = Vec::new();

    for task in cfg.task_ids()? {
        for &seed in &cfg.eval.seeds {
            let dir = seed_dir(&run_dir, task, seed);
            let artifacts = train_stages(cfg, task, seed)?;
            persist_artifacts(&dir, &artifacts)?;

            let mut episodes: Vec<EpisodeRow> = Vec::new();
            let mut traces: Vec<TraceRowOut> = Vec::new();
            for arm in ARMS {
                let results = evaluate_arm(
                    cfg,
                    task,
                    arm_model(&artifacts, arm),
                    arm_spec(cfg, arm)?,
                    seed,
                )?;
                summary.push(SummaryRow {
                    task: task.name().into(),
                    arm: arm.into(),
                    success_rate_pct: success_rate_pct(&results),
                    n_episodes: results.len(),
                    seed,
                });
                episodes.extend(episode_rows(task, arm, &results));
                traces.extend(trace_rows(task, arm, &results));
            }
            write_csv(&dir.join("episodes.csv"), &episodes)?;
            write_csv(&dir.join("lambda_traces.csv"), &traces)?;
        }
    }

    write_csv(&run_dir.join("summary.csv"), &summary)?;
    let report = aggregate(cfg, &summary)?;
    write_csv(&run_dir.join("report.csv"), &report.rows)?;
    Ok(report)
}

/// Sweep a guidance scale over `values` against one checkpoint. One summary
/// row per value, all sharing paired episode seeds.
pub fn ablate(
    cfg: &RunConfig,
    task: TaskId,
    model: &DagModel,
    param: &str,
    values: &[f64],
    eval_seed: u64,
) -> LabResult<(Vec<SummaryRow>, Vec<EpisodeRow>)> {
    let mut summary = Vec::new();
    let mut episodes = Vec::new();
    for &v in values {
        let mut guidance = match param {
            "alpha" => GuidanceSpec::adaptive_fi(v),
            "lambda" => GuidanceSpec::static_fi(v),
            other => {
                return Err(LabError::Config(format!(
                    "unknown sweep parameter {other:?}, expected alpha or lambda"
                )))
            }
        };
        guidance.cos_floor = cfg.guidance.cos_floor;
        let results = evaluate_arm(cfg, task, model, guidance, eval_seed)?;
        let arm = format!("{param}={v}");
        summary.push(SummaryRow {
            task: task.name().into(),
            arm: arm.clone(),
            success_rate_pct: success_rate_pct(&results),
            n_episodes: results.len(),
            seed: eval_seed,
        });
        episodes.extend(episode_rows(task, &arm, &results));
    }
    Ok((summary, episodes))
}
