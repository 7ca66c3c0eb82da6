//! Replay and replanning-based failure correction.

use alloc::vec::Vec;

use crate::data::{TrajOutcome, TrajStep, Trajectory};
use crate::error::{CoreError, CoreResult};

use super::expert::simulate_expert;
use super::{reset, step, EnvState, Outcome, TaskSpec};

/// Re-execute an action sequence from its deterministic initial state.
/// Returns the state after each executed action (index 0 is the reset
/// state); stops early at a terminal state.
pub fn replay_states(spec: &TaskSpec, config_id: u64, actions: &[Vec<f64>]) -> Vec<EnvState> {
    let mut state = reset(spec, config_id, 0);
    let mut states = Vec::with_capacity(actions.len() + 1);
    states.push(state.clone());
    for a in actions {
        if state.terminal() {
            break;
        }
        step(&mut state, a, spec);
        states.push(state.clone());
    }
    states
}

/// Replay a trajectory and report its terminal outcome.
pub fn replay_outcome(spec: &TaskSpec, traj: &Trajectory) -> Outcome {
    let actions: Vec<Vec<f64>> = traj.steps.iter().map(|s| s.action.clone()).collect();
    replay_states(spec, traj.config_id, &actions)
        .last()
        .map(|s| s.outcome)
        .unwrap_or(Outcome::Running)
}

/// Truncate a failed rollout at its latest recoverable state and append
/// planner actions to success. The kept prefix is bitwise a prefix of the
/// input. Recoverable means: still running, the agent clear of every trap
/// inflated by the grasp radius, and the expert able to finish within the
/// remaining horizon.
pub fn replan_correction(
    traj: &Trajectory,
    spec: &TaskSpec,
    new_uid: u64,
) -> CoreResult<Trajectory> {
    if traj.outcome != TrajOutcome::Failure {
        return Err(CoreError::Contract(alloc::format!(
            "replan_correction expects a failure trajectory, got {}",
            traj.outcome.name()
        )));
    }
    let actions: Vec<Vec<f64>> = traj.steps.iter().map(|s| s.action.clone()).collect();
    let states = replay_states(spec, traj.config_id, &actions);
    let rho = spec.params.grasp_radius;

    for j in (0..states.len()).rev() {
        let s = &states[j];
        if s.outcome != Outcome::Running {
            continue;
        }
        if !s.traps.iter().all(|t| !t.inflate(rho).contains(s.agent)) {
            continue;
        }
        let Ok(records) = simulate_expert(s, spec) else {
            continue;
        };
        let mut steps: Vec<TrajStep> = traj.steps[..j].to_vec();
        steps.extend(
            records
                .into_iter()
                .map(|(obs, action)| TrajStep { obs, action }),
        );
        return Ok(Trajectory {
            uid: new_uid,
            task: traj.task,
            config_id: traj.config_id,
            seed: traj.seed,
            steps,
            outcome: TrajOutcome::Corrected,
            correction_start: Some(j),
            numeric_fault: false,
            lambda_log: None,
        });
    }
    Err(CoreError::NoCorrection)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{expert::expert_chunk, observe, EnvParams, TaskId};

    fn spec() -> TaskSpec {
        TaskSpec::new(TaskId::PickPlace, EnvParams::default())
    }

    /// Expert-driven rollout that stalls after `stall_after` steps, timing
    /// out mid-task.
    fn stalled_failure(spec: &TaskSpec, config_id: u64, stall_after: usize) -> Trajectory {
        let mut state = reset(spec, config_id, 0);
        let mut steps = Vec::new();
        while !state.terminal() {
            let action = if state.step_count < stall_after {
                expert_chunk(&state, spec, 1).unwrap().remove(0)
            } else {
                alloc::vec![0.0, 0.0, if state.holding.is_some() { 1.0 } else { 0.0 }]
            };
            let obs = observe(&state, spec);
            step(&mut state, &action, spec);
            steps.push(TrajStep { obs, action });
        }
        assert_eq!(state.outcome, Outcome::Failure, "setup expects a timeout");
        Trajectory {
            uid: 1,
            task: spec.task,
            config_id,
            seed: 0,
            steps,
            outcome: TrajOutcome::Failure,
            correction_start: None,
            numeric_fault: false,
            lambda_log: None,
        }
    }

    #[test]
    fn timeout_mid_carry_is_corrected_and_replays_to_success() {
        let s = spec();
        for config in [0u64, 5, 9] {
            let fail = stalled_failure(&s, config, 25);
            let corrected = replan_correction(&fail, &s, 99).unwrap();
            assert_eq!(corrected.outcome, TrajOutcome::Corrected);
            assert_eq!(replay_outcome(&s, &corrected), Outcome::Success);
            // prefix is bitwise a prefix of the input
            let k = corrected.correction_start.unwrap();
            assert!(k < corrected.steps.len());
            assert_eq!(&corrected.steps[..k], &fail.steps[..k]);
            corrected.validate().unwrap();
        }
    }

    #[test]
    fn successful_trajectory_is_rejected() {
        let s = spec();
        let mut t = stalled_failure(&s, 2, 25);
        t.outcome = TrajOutcome::Success;
        assert!(matches!(
            replan_correction(&t, &s, 1),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn trap_entry_failures_are_corrected() {
        // drive the expert path, then deliberately steer into a trap while
        // holding
        let s = spec();
        let mut found = 0;
        for config in 0..40u64 {
            let mut state = reset(&s, config, 0);
            if state.traps.is_empty() {
                continue;
            }
            let trap_center = state.traps[0].center();
            let mut steps = Vec::new();
            while !state.terminal() {
                let action = if state.holding.is_none() {
                    expert_chunk(&state, &s, 1).unwrap().remove(0)
                } else {
                    let d = state.agent.dir_to(trap_center).scale(s.params.max_step);
                    alloc::vec![d.x, d.y, 1.0]
                };
                let obs = observe(&state, &s);
                step(&mut state, &action, &s);
                steps.push(TrajStep { obs, action });
            }
            if state.outcome != Outcome::Failure {
                continue;
            }
            let traj = Trajectory {
                uid: config,
                task: s.task,
                config_id: config,
                seed: 0,
                steps,
                outcome: TrajOutcome::Failure,
                correction_start: None,
                numeric_fault: false,
                lambda_log: None,
            };
            let corrected = replan_correction(&traj, &s, 1000 + config).unwrap();
            assert_eq!(replay_outcome(&s, &corrected), Outcome::Success);
            found += 1;
        }
        assert!(found >= 10, "only {found} trap failures constructed");
    }
}
