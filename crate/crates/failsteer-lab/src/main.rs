//! `failsteer` CLI: staged training, dataset collection, checkpoint
//! evaluation, guidance-scale ablations and report aggregation.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use failsteer_core::data::collect_rollouts;
use failsteer_core::eval::success_rate_pct;
use failsteer_core::guidance::{GuidanceKind, GuidanceSpec};
use failsteer_core::policy::{ExpertPolicy, GenerativePolicy, NoisyExpertPolicy, Policy};

use failsteer_lab::checkpoint::load_model;
use failsteer_lab::config::{out_root, parse_task, RunConfig};
use failsteer_lab::csvio::{
    episode_rows, read_csv, recount_success_rates, trace_rows, write_csv, EpisodeRow, SummaryRow,
    TraceRowOut,
};
use failsteer_lab::dataset_io::save_dataset;
use failsteer_lab::pipeline::{
    aggregate, ablate, evaluate_arm, full_pipeline, load_artifacts, persist_artifacts, seed_dir,
    stage1, stage2, stage3, SeedArtifacts,
};

#[derive(Parser)]
#[command(name = "failsteer", version, about = "Failure-informed action policy lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the training pipeline (all stages, evaluation and report by
    /// default; --stage 1|2|3 runs one stage against existing artifacts).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Roll a policy over a config grid and write the trajectories.
    Collect {
        #[arg(long)]
        config: PathBuf,
        /// expert | noisy-expert | checkpoint
        #[arg(long)]
        policy: String,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 50)]
        configs: u64,
        #[arg(long, default_value_t = 3)]
        runs: u64,
        #[arg(long, default_value_t = 0.04)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        /// Checkpoint path when --policy checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output dataset file, relative to the output root.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one checkpoint under one guidance spec over configs x runs.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// none | cfg | np | static-fi | adaptive-fi
        #[arg(long, default_value = "none")]
        kind: String,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        eval_seed: Option<u64>,
        /// Output directory, relative to the output root.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Sweep a guidance scale (alpha or lambda) over a value list.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// alpha | lambda
        #[arg(long, default_value = "alpha")]
        param: String,
        /// Comma-separated values; defaults to the config's alpha_sweep.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        eval_seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Aggregate a run directory: verify counts, print and write the table,
    /// merge guidance traces.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn resolve_out(p: &PathBuf) -> PathBuf {
    if p.is_absolute() {
        p.clone()
    } else {
        out_root().join(p)
    }
}

fn parse_kind(s: &str) -> anyhow::Result<GuidanceKind> {
    Ok(match s {
        "none" => GuidanceKind::None,
        "cfg" => GuidanceKind::Cfg,
        "np" => GuidanceKind::Np,
        "static-fi" => GuidanceKind::StaticFi,
        "adaptive-fi" => GuidanceKind::AdaptiveFi,
        other => bail!("unknown guidance kind {other:?}"),
    })
}

fn guidance_from_flags(
    cfg: &RunConfig,
    kind: GuidanceKind,
    lambda: Option<f64>,
    alpha: Option<f64>,
) -> GuidanceSpec {
    GuidanceSpec {
        kind,
        lambda: lambda.unwrap_or(cfg.guidance.static_lambda),
        alpha: alpha.unwrap_or(cfg.guidance.alpha),
        cos_floor: cfg.guidance.cos_floor,
    }
}

#[derive(Serialize)]
struct MergedTraceRow {
    seed: u64,
    #[serde(flatten)]
    row: TraceRowOut,
}

fn cmd_train(config: PathBuf, stage: String) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&config)?;
    match stage.as_str() {
        "all" => {
            let run_dir = cfg.run_dir();
            std::fs::create_dir_all(&run_dir)
                .with_context(|| format!("creating {}", run_dir.display()))?;
            std::fs::write(
                run_dir.join("config_used.toml"),
                toml::to_string_pretty(&cfg)?,
            )?;
            let report = full_pipeline(&cfg)?;
            println!("{}", report.table);
            println!("artifacts under {}", run_dir.display());
        }
        "1" | "2" | "3" => {
            let run_dir = cfg.run_dir();
            for task in cfg.task_ids()? {
                for &seed in &cfg.eval.seeds {
                    let dir = seed_dir(&run_dir, task, seed);
                    let artifacts: SeedArtifacts = match stage.as_str() {
                        "1" => {
                            let (model1, demos, log1) = stage1(&cfg, task, seed)?;
                            SeedArtifacts {
                                model2: model1.clone(),
                                model3: model1.clone(),
                                ds2: demos.clone(),
                                df2: Default::default(),
                                model1,
                                demos,
                                log1,
                                log2: Default::default(),
                                log3: Default::default(),
                            }
                        }
                        "2" => {
                            let mut a = load_artifacts(&dir)?;
                            let out = stage2(&cfg, task, seed, &a.model1, &a.demos)?;
                            a.model2 = out.model2;
                            a.model3 = a.model2.clone();
                            a.ds2 = out.ds2;
                            a.df2 = out.df2;
                            a.log2 = out.log2;
                            a
                        }
                        _ => {
                            let mut a = load_artifacts(&dir)?;
                            let (model3, log3) = stage3(&cfg, seed, &a.model2, &a.ds2, &a.df2)?;
                            a.model3 = model3;
                            a.log3 = log3;
                            a
                        }
                    };
                    persist_artifacts(&dir, &artifacts)?;
                    println!("stage {stage} done: {}", dir.display());
                }
            }
        }
        other => bail!("unknown stage {other:?}, expected all|1|2|3"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_collect(
    config: PathBuf,
    policy: String,
    task: String,
    configs: u64,
    runs: u64,
    sigma: f64,
    base_seed: u64,
    checkpoint: Option<PathBuf>,
    out: PathBuf,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&config)?;
    let task = parse_task(&task)?;
    let spec = cfg.task_spec(task);
    let chunk_len = cfg.model.horizon;

    let mut expert = ExpertPolicy {
        spec: spec.clone(),
        chunk_len,
    };
    let mut noisy = NoisyExpertPolicy {
        inner: ExpertPolicy {
            spec: spec.clone(),
            chunk_len,
        },
        sigma,
    };
    let loaded;
    let mut generative;
    let pol: &mut dyn Policy = match policy.as_str() {
        "expert" => &mut expert,
        "noisy-expert" => &mut noisy,
        "checkpoint" => {
            let path = checkpoint.context("--policy checkpoint requires --checkpoint")?;
            loaded = load_model(&path)?;
            generative = GenerativePolicy {
                model: &loaded,
                guidance: GuidanceSpec::none(),
                task_index: task.index(),
            };
            &mut generative
        }
        other => bail!("unknown policy {other:?}, expected expert|noisy-expert|checkpoint"),
    };

    let trajs = collect_rollouts(pol, &spec, 0..configs, runs, base_seed, 0)?;
    let n_success = trajs
        .iter()
        .filter(|t| t.outcome == failsteer_core::data::TrajOutcome::Success)
        .count();
    let out = resolve_out(&out);
    save_dataset(&out, &trajs)?;
    println!(
        "collected {} trajectories ({} success) -> {}",
        trajs.len(),
        n_success,
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    config: PathBuf,
    checkpoint: PathBuf,
    task: String,
    kind: String,
    lambda: Option<f64>,
    alpha: Option<f64>,
    eval_seed: Option<u64>,
    out_dir: PathBuf,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&config)?;
    let task = parse_task(&task)?;
    let model = load_model(&checkpoint)?;
    let kind = parse_kind(&kind)?;
    let guidance = guidance_from_flags(&cfg, kind, lambda, alpha);
    guidance.validate()?;
    let eval_seed = eval_seed.unwrap_or(cfg.run.seed);

    let results = evaluate_arm(&cfg, task, &model, guidance, eval_seed)?;
    let arm = format!("{kind:?}").to_lowercase();
    let out_dir = resolve_out(&out_dir);
    write_csv(
        &out_dir.join("episodes.csv"),
        &episode_rows(task, &arm, &results),
    )?;
    write_csv(
        &out_dir.join("lambda_traces.csv"),
        &trace_rows(task, &arm, &results),
    )?;
    let summary = vec![SummaryRow {
        task: task.name().into(),
        arm,
        success_rate_pct: success_rate_pct(&results),
        n_episodes: results.len(),
        seed: eval_seed,
    }];
    write_csv(&out_dir.join("summary.csv"), &summary)?;
    println!(
        "{}: {:.1}% success over {} episodes -> {}",
        summary[0].arm,
        summary[0].success_rate_pct,
        summary[0].n_episodes,
        out_dir.display()
    );
    Ok(())
}

fn cmd_ablate(
    config: PathBuf,
    checkpoint: PathBuf,
    task: String,
    param: String,
    values: Option<String>,
    eval_seed: Option<u64>,
    out_dir: PathBuf,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&config)?;
    let task = parse_task(&task)?;
    let model = load_model(&checkpoint)?;
    let values: Vec<f64> = match values {
        Some(list) => list
            .split(',')
            .map(|v| v.trim().parse::<f64>().context("bad sweep value"))
            .collect::<anyhow::Result<_>>()?,
        None => cfg.guidance.alpha_sweep.clone(),
    };
    if values.is_empty() {
        bail!("empty sweep value list");
    }
    let eval_seed = eval_seed.unwrap_or(cfg.run.seed);
    let (summary, episodes) = ablate(&cfg, task, &model, &param, &values, eval_seed)?;
    let out_dir = resolve_out(&out_dir);
    write_csv(&out_dir.join("ablation_summary.csv"), &summary)?;
    write_csv(&out_dir.join("ablation_episodes.csv"), &episodes)?;
    for s in &summary {
        println!("{}: {:.1}%", s.arm, s.success_rate_pct);
    }
    println!("-> {}", out_dir.display());
    Ok(())
}

fn cmd_report(run_dir: PathBuf) -> anyhow::Result<()> {
    let run_dir = resolve_out(&run_dir);
    let cfg_path = run_dir.join("config_used.toml");
    let cfg = RunConfig::load(&cfg_path)
        .with_context(|| format!("reading {}", cfg_path.display()))?;
    let summary: Vec<SummaryRow> = read_csv(&run_dir.join("summary.csv"))?;

    // independent recount from the per-seed episode files
    let mut merged_traces: Vec<MergedTraceRow> = Vec::new();
    for task in cfg.task_ids()? {
        for &seed in &cfg.eval.seeds {
            let dir = seed_dir(&run_dir, task, seed);
            let episodes: Vec<EpisodeRow> = read_csv(&dir.join("episodes.csv"))?;
            let counts = recount_success_rates(&episodes);
            for s in summary
                .iter()
                .filter(|s| s.seed == seed && s.task == task.name())
            {
                let recount = counts
                    .get(&(s.task.clone(), s.arm.clone()))
                    .copied()
                    .unwrap_or(f64::NAN);
                if (recount - s.success_rate_pct).abs() > 1e-9 {
                    bail!(
                        "summary mismatch for {}/{} seed {}: {} vs recount {}",
                        s.task,
                        s.arm,
                        seed,
                        s.success_rate_pct,
                        recount
                    );
                }
            }
            let traces: Vec<TraceRowOut> = read_csv(&dir.join("lambda_traces.csv"))?;
            merged_traces.extend(traces.into_iter().map(|row| MergedTraceRow { seed, row }));
        }
    }

    let report = aggregate(&cfg, &summary)?;
    write_csv(&run_dir.join("report.csv"), &report.rows)?;
    write_csv(&run_dir.join("lambda_traces.csv"), &merged_traces)?;
    println!("{}", report.table);
    println!("recount check passed; report.csv and lambda_traces.csv written");
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train { config, stage } => cmd_train(config, stage),
        Cmd::Collect {
            config,
            policy,
            task,
            configs,
            runs,
            sigma,
            base_seed,
            checkpoint,
            out,
        } => cmd_collect(
            config, policy, task, configs, runs, sigma, base_seed, checkpoint, out,
        ),
        Cmd::Eval {
            config,
            checkpoint,
            task,
            kind,
            lambda,
            alpha,
            eval_seed,
            out_dir,
        } => cmd_eval(
            config, checkpoint, task, kind, lambda, alpha, eval_seed, out_dir,
        ),
        Cmd::Ablate {
            config,
            checkpoint,
            task,
            param,
            values,
            eval_seed,
            out_dir,
        } => cmd_ablate(config, checkpoint, task, param, values, eval_seed, out_dir),
        Cmd::Report { run_dir } => cmd_report(run_dir),
    }
}
