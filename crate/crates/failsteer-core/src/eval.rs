//! Rollout execution and the paired evaluation protocol.

use alloc::vec::Vec;

use rand::SeedableRng as _;

use crate::data::{TrajOutcome, TrajStep, Trajectory};
use crate::env::{observe, reset, step, Outcome, TaskSpec};
use crate::error::{CoreError, CoreResult};
use crate::policy::Policy;
use crate::rng::{derive_seed, Rng};

/// One guidance-scale sample tagged with its sampler position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub chunk_index: usize,
    pub step_index: usize,
    pub lambda: f64,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub config_id: u64,
    pub run: u64,
    pub outcome: Outcome,
    pub steps: usize,
    pub mean_lambda: f64,
    pub numeric_fault: bool,
    pub clamped_steps: usize,
    pub trace: Vec<TraceRow>,
}

impl EpisodeResult {
    pub fn succeeded(&self) -> bool {
        self.outcome == Outcome::Success
    }
}

/// Execute one chunked open-loop episode. The policy re-plans at chunk
/// boundaries; a non-finite policy output records a failure with the
/// numeric-fault flag rather than erroring out.
pub fn run_episode(
    policy: &mut dyn Policy,
    spec: &TaskSpec,
    config_id: u64,
    run: u64,
    episode_seed: u64,
    uid: u64,
) -> CoreResult<(EpisodeResult, Trajectory)> {
    let mut rng = Rng::seed_from_u64(episode_seed);
    let mut state = reset(spec, config_id, episode_seed);
    let mut steps: Vec<TrajStep> = Vec::new();
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut numeric_fault = false;
    let mut clamped_steps = 0;
    let mut chunk_index = 0;

    while !state.terminal() {
        let obs = observe(&state, spec);
        let planned = match policy.plan(&obs, &mut rng) {
            Ok(p) => p,
            Err(CoreError::Numeric { .. }) => {
                numeric_fault = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if planned.actions.is_empty() {
            return Err(CoreError::Contract("policy returned an empty chunk".into()));
        }
        trace.extend(
            planned
                .trace
                .iter()
                .enumerate()
                .map(|(i, s)| TraceRow {
                    chunk_index,
                    step_index: i,
                    lambda: s.lambda,
                    cosine: s.cosine,
                }),
        );
        clamped_steps += planned.clamped_steps;
        for action in planned.actions {
            let obs = observe(&state, spec);
            step(&mut state, &action, spec);
            steps.push(TrajStep { obs, action });
            if state.terminal() {
                break;
            }
        }
        chunk_index += 1;
    }

    let outcome = if numeric_fault {
        Outcome::Failure
    } else {
        state.outcome
    };
    let mean_lambda = if trace.is_empty() {
        0.0
    } else {
        trace.iter().map(|t| t.lambda).sum::<f64>() / trace.len() as f64
    };
    if steps.is_empty() {
        // a numeric fault on the very first query still yields a record
        steps.push(TrajStep {
            obs: observe(&state, spec),
            action: alloc::vec![0.0; spec.task.action_dim()],
        });
    }
    let lambdas: Vec<f64> = trace.iter().map(|t| t.lambda).collect();
    let trajectory = Trajectory {
        uid,
        task: spec.task,
        config_id,
        seed: episode_seed,
        steps,
        outcome: match outcome {
            Outcome::Success => TrajOutcome::Success,
            _ => TrajOutcome::Failure,
        },
        correction_start: None,
        numeric_fault,
        lambda_log: if lambdas.is_empty() {
            None
        } else {
            Some(lambdas)
        },
    };
    let result = EpisodeResult {
        config_id,
        run,
        outcome,
        steps: state.step_count,
        mean_lambda,
        numeric_fault,
        clamped_steps,
        trace,
    };
    Ok((result, trajectory))
}

/// Episode seed shared by every arm evaluating the same (task, config, run)
/// triple, so cross-arm comparisons are paired.
pub fn episode_seed(eval_seed: u64, spec: &TaskSpec, config_id: u64, run: u64) -> u64 {
    derive_seed(eval_seed, &[spec.task.index() as u64, config_id, run])
}

/// Score one policy over a configs-by-runs grid. `configs` is a range of
/// config ids, so evaluation can use ids disjoint from training.
pub fn evaluate(
    policy: &mut dyn Policy,
    spec: &TaskSpec,
    configs: core::ops::Range<u64>,
    n_runs: u64,
    eval_seed: u64,
) -> CoreResult<Vec<EpisodeResult>> {
    let mut results = Vec::new();
    for config_id in configs {
        for run in 0..n_runs {
            let seed = episode_seed(eval_seed, spec, config_id, run);
            let (res, _traj) = run_episode(policy, spec, config_id, run, seed, 0)?;
            results.push(res);
        }
    }
    Ok(results)
}

/// Success percentage: `count(success) / count(all) * 100`.
pub fn success_rate_pct(results: &[EpisodeResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let wins = results.iter().filter(|r| r.succeeded()).count();
    100.0 * wins as f64 / results.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvParams, TaskId};
    use crate::policy::{ExpertPolicy, PlannedChunk};

    fn spec() -> TaskSpec {
        TaskSpec::new(TaskId::PickPlace, EnvParams::default())
    }

    #[test]
    fn expert_policy_scores_a_hundred_percent() {
        let s = spec();
        let mut expert = ExpertPolicy {
            spec: s.clone(),
            chunk_len: 8,
        };
        let results = evaluate(&mut expert, &s, 0..20, 2, 7).unwrap();
        assert_eq!(results.len(), 40);
        assert_eq!(success_rate_pct(&results), 100.0);
    }

    #[test]
    fn rollout_arithmetic_matches_configs_times_runs() {
        let s = spec();
        let mut expert = ExpertPolicy {
            spec: s.clone(),
            chunk_len: 8,
        };
        let results = evaluate(&mut expert, &s, 0..50, 3, 1).unwrap();
        assert_eq!(results.len(), 150);
    }

    #[test]
    fn episodes_are_deterministic_per_seed() {
        let s = spec();
        let mut expert = ExpertPolicy {
            spec: s.clone(),
            chunk_len: 8,
        };
        let (r1, t1) = run_episode(&mut expert, &s, 3, 0, 42, 1).unwrap();
        let (r2, t2) = run_episode(&mut expert, &s, 3, 0, 42, 1).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn numeric_fault_is_recorded_not_raised() {
        struct NanPolicy;
        impl Policy for NanPolicy {
            fn plan(&mut self, _obs: &[f64], _rng: &mut Rng) -> CoreResult<PlannedChunk> {
                Err(CoreError::Numeric { op: "test" })
            }
        }
        let s = spec();
        let (res, traj) = run_episode(&mut NanPolicy, &s, 0, 0, 1, 1).unwrap();
        assert!(res.numeric_fault);
        assert_eq!(res.outcome, Outcome::Failure);
        assert!(traj.numeric_fault);
        assert_eq!(traj.outcome, TrajOutcome::Failure);
    }

    #[test]
    fn paired_seeds_are_arm_independent() {
        let s = spec();
        let a: Vec<u64> = (0..5)
            .map(|c| episode_seed(9, &s, c, 1))
            .collect();
        let b: Vec<u64> = (0..5)
            .map(|c| episode_seed(9, &s, c, 1))
            .collect();
        assert_eq!(a, b);
    }
}
