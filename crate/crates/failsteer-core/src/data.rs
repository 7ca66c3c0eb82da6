//! Trajectory records, dataset assembly and normalization statistics.
//!
//! Outcome routing: successes and corrected recoveries form the success
//! split, raw failures the failure split — never both. Statistics are
//! computed over the union and are order-independent by construction
//! (per-dimension values are summed in sorted order).

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::env::TaskId;
use crate::error::{CoreError, CoreResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajOutcome {
    Success,
    Failure,
    Corrected,
}

impl TrajOutcome {
    pub fn name(self) -> &'static str {
        match self {
            TrajOutcome::Success => "success",
            TrajOutcome::Failure => "failure",
            TrajOutcome::Corrected => "corrected",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajStep {
    /// Raw observation (env units).
    pub obs: Vec<f64>,
    /// Executed action (env units, post-clipping).
    pub action: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Unique within a collection; corrected trajectories get fresh ids.
    pub uid: u64,
    pub task: TaskId,
    pub config_id: u64,
    pub seed: u64,
    pub steps: Vec<TrajStep>,
    pub outcome: TrajOutcome,
    /// For corrected trajectories: first step index contributed by the
    /// planner rather than the original rollout.
    pub correction_start: Option<usize>,
    /// Episode aborted on a non-finite policy output.
    pub numeric_fault: bool,
    /// Per-sampler-step guidance scales, when guidance was active.
    pub lambda_log: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn validate(&self) -> CoreResult<()> {
        if self.steps.is_empty() {
            return Err(CoreError::Contract("trajectory with no steps".into()));
        }
        match (self.outcome, self.correction_start) {
            (TrajOutcome::Corrected, Some(k)) if k < self.steps.len() => {}
            (TrajOutcome::Corrected, k) => {
                return Err(CoreError::Contract(format!(
                    "corrected trajectory needs correction_start in [0, {}), got {k:?}",
                    self.steps.len()
                )))
            }
            (_, Some(_)) => {
                return Err(CoreError::Contract(
                    "correction_start on a non-corrected trajectory".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Per-dimension normalization statistics plus outcome counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataStats {
    pub action_min: Vec<f64>,
    pub action_max: Vec<f64>,
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub n_success: usize,
    pub n_failure: usize,
    pub n_corrected: usize,
}

/// Sum in a content-determined order so the result is independent of record
/// order.
fn sorted_sum(values: &mut Vec<f64>) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

impl DataStats {
    /// Pass-through stats (identity normalization) for synthetic setups.
    pub fn identity(obs_dim: usize, action_dim: usize) -> Self {
        DataStats {
            action_min: vec![-1.0; action_dim],
            action_max: vec![1.0; action_dim],
            obs_mean: vec![0.0; obs_dim],
            obs_std: vec![1.0; obs_dim],
            n_success: 0,
            n_failure: 0,
            n_corrected: 0,
        }
    }

    pub fn compute(trajectories: &[Trajectory]) -> CoreResult<Self> {
        let first = trajectories
            .first()
            .and_then(|t| t.steps.first())
            .ok_or_else(|| CoreError::Data("stats over an empty dataset".into()))?;
        let action_dim = first.action.len();
        let obs_dim = first.obs.len();

        let mut action_cols: Vec<Vec<f64>> = vec![Vec::new(); action_dim];
        let mut obs_cols: Vec<Vec<f64>> = vec![Vec::new(); obs_dim];
        let (mut n_success, mut n_failure, mut n_corrected) = (0, 0, 0);
        for t in trajectories {
            match t.outcome {
                TrajOutcome::Success => n_success += 1,
                TrajOutcome::Failure => n_failure += 1,
                TrajOutcome::Corrected => n_corrected += 1,
            }
            for s in &t.steps {
                if s.action.len() != action_dim || s.obs.len() != obs_dim {
                    return Err(CoreError::Data(format!(
                        "inconsistent dims in trajectory {}: action {} obs {}",
                        t.uid,
                        s.action.len(),
                        s.obs.len()
                    )));
                }
                for (d, &v) in s.action.iter().enumerate() {
                    action_cols[d].push(v);
                }
                for (d, &v) in s.obs.iter().enumerate() {
                    obs_cols[d].push(v);
                }
            }
        }

        let n = action_cols[0].len() as f64;
        let mut action_min = Vec::with_capacity(action_dim);
        let mut action_max = Vec::with_capacity(action_dim);
        for col in &action_cols {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in col {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            // widen degenerate ranges so min < max always holds
            if hi - lo < 1e-9 {
                lo -= 0.5;
                hi += 0.5;
            }
            action_min.push(lo);
            action_max.push(hi);
        }

        let mut obs_mean = Vec::with_capacity(obs_dim);
        let mut obs_std = Vec::with_capacity(obs_dim);
        for col in &mut obs_cols {
            let mean = sorted_sum(col) / n;
            let mut devs: Vec<f64> = col.iter().map(|&v| (v - mean) * (v - mean)).collect();
            let var = sorted_sum(&mut devs) / n;
            obs_mean.push(mean);
            obs_std.push(libm::sqrt(var).max(1e-6));
        }

        Ok(DataStats {
            action_min,
            action_max,
            obs_mean,
            obs_std,
            n_success,
            n_failure,
            n_corrected,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_min.len()
    }

    /// Z-score an observation.
    pub fn normalize_obs(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(self.obs_mean.iter().zip(self.obs_std.iter()))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    }

    /// Map one action dimension to [-1, 1] by dataset min/max.
    fn norm_dim(&self, d: usize, v: f64) -> f64 {
        2.0 * (v - self.action_min[d]) / (self.action_max[d] - self.action_min[d]) - 1.0
    }

    fn denorm_dim(&self, d: usize, v: f64) -> f64 {
        self.action_min[d] + (v + 1.0) / 2.0 * (self.action_max[d] - self.action_min[d])
    }

    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(d, &v)| self.norm_dim(d, v))
            .collect()
    }

    pub fn denormalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(d, &v)| self.denorm_dim(d, v))
            .collect()
    }

    /// Normalize a flattened `[H x d]` chunk (time-major).
    pub fn normalize_chunk(&self, chunk: &[f64]) -> Vec<f64> {
        let d = self.action_dim();
        chunk
            .iter()
            .enumerate()
            .map(|(i, &v)| self.norm_dim(i % d, v))
            .collect()
    }

    pub fn denormalize_chunk(&self, chunk: &[f64]) -> Vec<f64> {
        let d = self.action_dim();
        chunk
            .iter()
            .enumerate()
            .map(|(i, &v)| self.denorm_dim(i % d, v))
            .collect()
    }
}

/// How failure-derived trajectories are sliced into training chunks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureChunking {
    /// Every timestep yields a chunk, same as successes.
    #[default]
    Full,
    /// Bias supervision toward the diverging portion: raw failures
    /// contribute chunks starting in their second half, corrected
    /// trajectories from one window before the planner takeover (so the
    /// windows cover the recovery, not the drift that preceded it).
    PostDivergence,
}

/// One supervised pair: normalized observation and normalized flattened
/// action chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub obs: Vec<f64>,
    pub chunk: Vec<f64>,
    pub task_index: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Dataset { trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn uids(&self) -> BTreeSet<u64> {
        self.trajectories.iter().map(|t| t.uid).collect()
    }

    /// Materialize `(obs_t, a_{t:t+H})` pairs for every timestep of every
    /// trajectory; the final window repeats the last action. Observations
    /// and chunks come out normalized.
    pub fn training_pairs(
        &self,
        horizon: usize,
        stats: &DataStats,
        chunking: FailureChunking,
    ) -> CoreResult<Vec<TrainPair>> {
        if self.is_empty() {
            return Err(CoreError::Data("training_pairs on an empty split".into()));
        }
        let mut pairs = Vec::new();
        for traj in &self.trajectories {
            traj.validate()?;
            let n = traj.steps.len();
            let start = match (traj.outcome, chunking) {
                (TrajOutcome::Failure, FailureChunking::PostDivergence) => n / 2,
                (TrajOutcome::Corrected, FailureChunking::PostDivergence) => traj
                    .correction_start
                    .unwrap_or(0)
                    .saturating_sub(horizon),
                _ => 0,
            };
            for t in start..n {
                let mut chunk = Vec::with_capacity(horizon * stats.action_dim());
                for k in 0..horizon {
                    let idx = (t + k).min(n - 1);
                    chunk.extend_from_slice(&traj.steps[idx].action);
                }
                pairs.push(TrainPair {
                    obs: stats.normalize_obs(&traj.steps[t].obs),
                    chunk: stats.normalize_chunk(&chunk),
                    task_index: traj.task.index(),
                });
            }
        }
        Ok(pairs)
    }
}

/// Roll the policy over a configs-by-runs grid and keep the env-labeled
/// trajectories. Deterministic given `base_seed`; `uid_start` lets callers
/// keep ids unique across collections.
pub fn collect_rollouts(
    policy: &mut dyn crate::policy::Policy,
    spec: &crate::env::TaskSpec,
    configs: core::ops::Range<u64>,
    n_runs: u64,
    base_seed: u64,
    uid_start: u64,
) -> CoreResult<Vec<Trajectory>> {
    let mut out = Vec::new();
    let mut uid = uid_start;
    for config_id in configs {
        for run in 0..n_runs {
            let seed = crate::rng::derive_seed(
                base_seed,
                &[spec.task.index() as u64, config_id, run],
            );
            let (_res, traj) =
                crate::eval::run_episode(policy, spec, config_id, run, seed, uid)?;
            out.push(traj);
            uid += 1;
        }
    }
    Ok(out)
}

/// Split labeled trajectories into the success side (successes + corrected)
/// and the failure side (raw failures), with statistics over the union.
pub fn build_datasets(trajectories: Vec<Trajectory>) -> CoreResult<(Dataset, Dataset, DataStats)> {
    let stats = DataStats::compute(&trajectories)?;
    let mut success = Vec::new();
    let mut failure = Vec::new();
    for t in trajectories {
        match t.outcome {
            TrajOutcome::Success | TrajOutcome::Corrected => success.push(t),
            TrajOutcome::Failure => failure.push(t),
        }
    }
    if success.is_empty() {
        return Err(CoreError::Data("success split is empty".into()));
    }
    if failure.is_empty() {
        return Err(CoreError::Data("failure split is empty".into()));
    }
    Ok((Dataset::new(success), Dataset::new(failure), stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_traj(uid: u64, outcome: TrajOutcome, steps: usize) -> Trajectory {
        let steps = (0..steps)
            .map(|i| TrajStep {
                obs: vec![i as f64 * 0.1, 1.0 - i as f64 * 0.05],
                action: vec![0.01 * i as f64, -0.02, if i % 2 == 0 { 1.0 } else { 0.0 }],
            })
            .collect();
        Trajectory {
            uid,
            task: TaskId::PickPlace,
            config_id: uid,
            seed: uid,
            steps,
            outcome,
            correction_start: if outcome == TrajOutcome::Corrected {
                Some(1)
            } else {
                None
            },
            numeric_fault: false,
            lambda_log: None,
        }
    }

    #[test]
    fn build_datasets_routes_outcomes() {
        let trajs = vec![
            toy_traj(0, TrajOutcome::Success, 4),
            toy_traj(1, TrajOutcome::Corrected, 4),
            toy_traj(2, TrajOutcome::Failure, 4),
        ];
        let (ds, df, stats) = build_datasets(trajs).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(df.len(), 1);
        assert_eq!(stats.n_success, 1);
        assert_eq!(stats.n_corrected, 1);
        assert_eq!(stats.n_failure, 1);
        assert!(ds.uids().is_disjoint(&df.uids()));
    }

    #[test]
    fn all_success_input_is_a_data_error() {
        let trajs = vec![toy_traj(0, TrajOutcome::Success, 3)];
        match build_datasets(trajs).unwrap_err() {
            CoreError::Data(msg) => assert!(msg.contains("failure"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn paper_scale_ratio_bookkeeping() {
        // 1500 success + 1000 corrected -> 2500 in D_s; 1500 failures in D_f
        let mut trajs = Vec::new();
        let mut uid = 0;
        for _ in 0..1500 {
            trajs.push(toy_traj(uid, TrajOutcome::Success, 2));
            uid += 1;
        }
        for _ in 0..1000 {
            trajs.push(toy_traj(uid, TrajOutcome::Corrected, 2));
            uid += 1;
        }
        for _ in 0..1500 {
            trajs.push(toy_traj(uid, TrajOutcome::Failure, 2));
            uid += 1;
        }
        let (ds, df, stats) = build_datasets(trajs).unwrap();
        assert_eq!(ds.len(), 2500);
        assert_eq!(df.len(), 1500);
        assert_eq!(stats.n_success + stats.n_corrected + stats.n_failure, 4000);
    }

    #[test]
    fn normalization_round_trips() {
        let trajs = vec![
            toy_traj(0, TrajOutcome::Success, 10),
            toy_traj(1, TrajOutcome::Failure, 7),
        ];
        let stats = DataStats::compute(&trajs).unwrap();
        let action = vec![0.03, -0.02, 1.0];
        let rt = stats.denormalize_action(&stats.normalize_action(&action));
        for (a, b) in action.iter().zip(rt.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let chunk = vec![0.01, 0.0, 1.0, 0.04, -0.02, 0.0];
        let rt = stats.denormalize_chunk(&stats.normalize_chunk(&chunk));
        for (a, b) in chunk.iter().zip(rt.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_are_order_independent() {
        let trajs: Vec<Trajectory> = (0..20)
            .map(|i| {
                toy_traj(
                    i,
                    if i % 3 == 0 {
                        TrajOutcome::Failure
                    } else {
                        TrajOutcome::Success
                    },
                    3 + (i as usize % 5),
                )
            })
            .collect();
        let mut shuffled = trajs.clone();
        shuffled.reverse();
        shuffled.swap(0, 7);
        shuffled.swap(3, 11);
        let a = DataStats::compute(&trajs).unwrap();
        let b = DataStats::compute(&shuffled).unwrap();
        assert_eq!(a.obs_mean, b.obs_mean);
        assert_eq!(a.obs_std, b.obs_std);
        assert_eq!(a.action_min, b.action_min);
        assert_eq!(a.action_max, b.action_max);
    }

    #[test]
    fn stats_widen_degenerate_action_dims() {
        let mut t = toy_traj(0, TrajOutcome::Success, 5);
        for s in &mut t.steps {
            s.action = vec![0.02, 0.02, 0.02];
        }
        let stats = DataStats::compute(&[t]).unwrap();
        for d in 0..3 {
            assert!(stats.action_min[d] < stats.action_max[d]);
        }
    }

    #[test]
    fn chunk_count_equals_step_count_and_chunks_are_padded() {
        let traj = toy_traj(0, TrajOutcome::Success, 5);
        let last_action = traj.steps.last().unwrap().action.clone();
        let stats = DataStats::compute(core::slice::from_ref(&traj)).unwrap();
        let ds = Dataset::new(vec![traj]);
        let h = 4;
        let pairs = ds
            .training_pairs(h, &stats, FailureChunking::Full)
            .unwrap();
        assert_eq!(pairs.len(), 5);
        for p in &pairs {
            assert_eq!(p.chunk.len(), 3 * h);
        }
        // final pair is the last action repeated H times
        let tail = &pairs[4].chunk;
        let last_norm = stats.normalize_action(&last_action);
        for k in 0..h {
            for d in 0..3 {
                assert_eq!(tail[k * 3 + d], last_norm[d]);
            }
        }
    }

    #[test]
    fn post_divergence_chunking_halves_failure_pairs() {
        let traj = toy_traj(0, TrajOutcome::Failure, 8);
        let stats = DataStats::compute(core::slice::from_ref(&traj)).unwrap();
        let ds = Dataset::new(vec![traj]);
        let full = ds.training_pairs(2, &stats, FailureChunking::Full).unwrap();
        let tail = ds
            .training_pairs(2, &stats, FailureChunking::PostDivergence)
            .unwrap();
        assert_eq!(full.len(), 8);
        assert_eq!(tail.len(), 4);
        assert_eq!(tail[0], full[4]);
    }
}
