//! Deterministic planar manipulation surrogates.
//!
//! The arena is the unit square. An agent moves by per-step deltas, can
//! grasp the active object within `grasp_radius` and must deliver it to the
//! matching goal. Axis-aligned trap rectangles mark failure-prone regions:
//! entering one while holding ends the episode as a failure, as does running
//! out of horizon. Everything is a pure function of `(config_id, action
//! sequence)`.

pub mod correct;
pub mod expert;
pub mod geom;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use geom::{Rect, Vec2};

use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Reach,
    PickPlace,
    TwoObjectSequence,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Reach, TaskId::PickPlace, TaskId::TwoObjectSequence];

    /// Position in the task one-hot vector.
    pub fn index(self) -> usize {
        match self {
            TaskId::Reach => 0,
            TaskId::PickPlace => 1,
            TaskId::TwoObjectSequence => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Reach => "reach",
            TaskId::PickPlace => "pick_place",
            TaskId::TwoObjectSequence => "two_object_sequence",
        }
    }

    /// Planar delta-position, plus a gripper channel when grasping exists.
    pub fn action_dim(self) -> usize {
        match self {
            TaskId::Reach => 2,
            _ => 3,
        }
    }

    pub fn n_objects(self) -> usize {
        match self {
            TaskId::Reach => 0,
            TaskId::PickPlace => 1,
            TaskId::TwoObjectSequence => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvParams {
    /// Per-timestep movement bound (arena units).
    pub max_step: f64,
    pub grasp_radius: f64,
    pub goal_radius: f64,
    pub horizon_short: usize,
    pub horizon_long: usize,
    pub min_traps: usize,
    pub max_traps: usize,
    /// Expert walking speed as a fraction of `max_step`.
    pub expert_speed: f64,
    /// Configs are resampled until the expert finishes within this fraction
    /// of the horizon.
    pub path_budget: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            max_step: 0.05,
            grasp_radius: 0.04,
            goal_radius: 0.04,
            horizon_short: 120,
            horizon_long: 240,
            min_traps: 1,
            max_traps: 4,
            expert_speed: 0.8,
            path_budget: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskId,
    pub horizon_limit: usize,
    pub params: EnvParams,
}

impl TaskSpec {
    pub fn new(task: TaskId, params: EnvParams) -> Self {
        let horizon_limit = match task {
            TaskId::TwoObjectSequence => params.horizon_long,
            _ => params.horizon_short,
        };
        TaskSpec {
            task,
            horizon_limit,
            params,
        }
    }

    /// Fixed observation layout: agent(2), active object(2), active goal(2),
    /// holding(1), phase(1), then one agent-relative trap slot
    /// (cx - ax, cy - ay, hw, hh, clear_x, clear_y) per trap where clear_*
    /// are signed axis clearances to the trap edges, then the relative
    /// offsets object-agent(2) and goal-agent(2).
    pub fn obs_dim(&self) -> usize {
        8 + 6 * self.params.max_traps + 4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Running,
    Success,
    Failure,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub agent: Vec2,
    pub objects: Vec<Vec2>,
    pub goals: Vec<Vec2>,
    /// Index of the held object, if any.
    pub holding: Option<usize>,
    /// Index of the active sub-task (object/goal pair).
    pub phase: usize,
    pub traps: Vec<Rect>,
    pub step_count: usize,
    pub outcome: Outcome,
}

impl EnvState {
    pub fn terminal(&self) -> bool {
        self.outcome != Outcome::Running
    }

    /// Position the policy is currently working on: active object for pick
    /// tasks (wherever it is), the goal itself for reach.
    pub fn active_object(&self) -> Vec2 {
        if self.objects.is_empty() {
            self.goals[self.phase]
        } else {
            self.objects[self.phase]
        }
    }

    pub fn active_goal(&self) -> Vec2 {
        self.goals[self.phase]
    }
}

fn clamp01(p: Vec2) -> Vec2 {
    Vec2::new(p.x.clamp(0.0, 1.0), p.y.clamp(0.0, 1.0))
}

fn sanitize(v: f64, bound: f64) -> f64 {
    if v.is_finite() {
        v.clamp(-bound, bound)
    } else {
        0.0
    }
}

const CONFIG_STREAM: u64 = 0x7261_7365_74; // reset stream tag

fn point_clear(p: Vec2, traps: &[Rect], margin: f64) -> bool {
    traps.iter().all(|t| !t.inflate(margin).contains(p))
}

/// Deterministic initial state for `(task, config_id)`. `run_seed`
/// intentionally varies nothing here: runs of one config differ only through
/// policy stochasticity.
pub fn reset(spec: &TaskSpec, config_id: u64, _run_seed: u64) -> EnvState {
    let p = &spec.params;
    let mut rng = rng::rng_for(CONFIG_STREAM, &[spec.task.index() as u64, config_id]);
    let clearance = p.grasp_radius + 0.02;

    for _attempt in 0..400 {
        let n_objects = spec.task.n_objects();
        let n_goals = n_objects.max(1);

        // object/goal layout
        let mut objects: Vec<Vec2> = Vec::new();
        let mut goals: Vec<Vec2> = Vec::new();
        let sample_pt =
            |rng: &mut rng::Rng| Vec2::new(rng.random_range(0.12..0.88), rng.random_range(0.12..0.88));
        let mut ok = true;
        for k in 0..n_goals {
            let (obj, goal) = 'pair: {
                for _ in 0..40 {
                    let o = sample_pt(&mut rng);
                    let g = sample_pt(&mut rng);
                    let far = o.dist(g) >= 0.35;
                    let sep = objects
                        .iter()
                        .chain(goals.iter())
                        .all(|q| q.dist(o) >= 0.12 && q.dist(g) >= 0.12);
                    if far && sep {
                        break 'pair (o, g);
                    }
                }
                ok = false;
                (Vec2::new(0.0, 0.0), Vec2::new(0.0, 0.0))
            };
            if !ok {
                break;
            }
            if n_objects > 0 {
                objects.push(obj);
            }
            goals.push(goal);
            let _ = k;
        }
        if !ok {
            continue;
        }

        // Traps come in mirrored pairs flanking each carry corridor: a gate
        // the nominal path threads or detours around. Failure-prone regions
        // on both sides make over-aggressive repulsion costly, not free.
        let mut traps: Vec<Rect> = Vec::new();
        if objects.is_empty() {
            // reach has no carry leg; traps are scenery
            let n = p.max_traps.min(p.min_traps.max(1));
            for _ in 0..n {
                let c = sample_pt(&mut rng);
                let hw = rng.random_range(0.05..0.09);
                let hh = rng.random_range(0.05..0.09);
                let c = Vec2::new(
                    c.x.clamp(0.10 + hw, 0.90 - hw),
                    c.y.clamp(0.10 + hh, 0.90 - hh),
                );
                traps.push(Rect::from_center(c, hw, hh));
            }
        } else {
            let n_gates = (p.max_traps / 2).min(objects.len());
            for leg in 0..n_gates {
                let (a, b) = (objects[leg], goals[leg]);
                let along = rng.random_range(0.35..0.65);
                let skew = rng.random_range(-0.03..0.03);
                let dir = a.dir_to(b);
                let perp = Vec2::new(-dir.y, dir.x);
                let anchor = a.lerp(b, along);
                // sample sizes first, then set the center offset so the gate
                // mouth clears the pairwise spacing floor even axis-aligned
                let halves: [(f64, f64); 2] = [
                    (rng.random_range(0.05..0.08), rng.random_range(0.05..0.08)),
                    (rng.random_range(0.05..0.08), rng.random_range(0.05..0.08)),
                ];
                let mouth = rng.random_range(0.11..0.16);
                let h_max = |i: usize| halves[i].0.max(halves[i].1);
                let gap = (h_max(0) + h_max(1) + mouth) / 2.0;
                for (i, side) in [1.0f64, -1.0].into_iter().enumerate() {
                    let (hw, hh) = halves[i];
                    let mut c = anchor.add(perp.scale(side * gap + skew));
                    c.x = c.x.clamp(0.10 + hw, 0.90 - hw);
                    c.y = c.y.clamp(0.10 + hh, 0.90 - hh);
                    traps.push(Rect::from_center(c, hw, hh));
                }
            }
        }

        // passages between traps must stay wide enough to plan through;
        // otherwise trap unions can seal pockets with no way out
        let rect_gap = |a: &Rect, b: &Rect| -> f64 {
            let dx = (a.min.x - b.max.x).max(b.min.x - a.max.x).max(0.0);
            let dy = (a.min.y - b.max.y).max(b.min.y - a.max.y).max(0.0);
            if dx > 0.0 && dy > 0.0 {
                libm::hypot(dx, dy)
            } else {
                dx.max(dy)
            }
        };
        let mut spaced = true;
        for i in 0..traps.len() {
            for j in (i + 1)..traps.len() {
                if rect_gap(&traps[i], &traps[j]) < 0.10 {
                    spaced = false;
                }
            }
        }
        if !spaced {
            continue;
        }

        // objects and goals must clear every trap
        let pts_ok = objects
            .iter()
            .chain(goals.iter())
            .all(|&q| point_clear(q, &traps, clearance));
        if !pts_ok {
            continue;
        }

        // agent start
        let first_target = if objects.is_empty() { goals[0] } else { objects[0] };
        let mut agent = None;
        for _ in 0..40 {
            let a = Vec2::new(rng.random_range(0.08..0.92), rng.random_range(0.08..0.92));
            if point_clear(a, &traps, clearance) && a.dist(first_target) >= 0.20 {
                agent = Some(a);
                break;
            }
        }
        let Some(agent) = agent else { continue };

        let state = EnvState {
            agent,
            objects,
            goals,
            holding: None,
            phase: 0,
            traps,
            step_count: 0,
            outcome: Outcome::Running,
        };

        // accept only configs the expert solves comfortably within horizon
        if let Ok(records) = expert::simulate_expert(&state, spec) {
            if records.len() <= (p.path_budget * spec.horizon_limit as f64) as usize {
                return state;
            }
        }
    }

    // trap-free fallback; solvable by construction
    let mut goals = vec![Vec2::new(0.7, 0.7)];
    let mut objects = vec![Vec2::new(0.3, 0.3)];
    match spec.task {
        TaskId::Reach => objects.clear(),
        TaskId::TwoObjectSequence => {
            objects.push(Vec2::new(0.3, 0.7));
            goals.push(Vec2::new(0.7, 0.3));
        }
        TaskId::PickPlace => {}
    }
    EnvState {
        agent: Vec2::new(0.1, 0.1),
        objects,
        goals,
        holding: None,
        phase: 0,
        traps: Vec::new(),
        step_count: 0,
        outcome: Outcome::Running,
    }
}

/// Raw observation vector; layout documented on [`TaskSpec::obs_dim`].
pub fn observe(state: &EnvState, spec: &TaskSpec) -> Vec<f64> {
    let mut obs = Vec::with_capacity(spec.obs_dim());
    let obj = state.active_object();
    let goal = state.active_goal();
    obs.extend([state.agent.x, state.agent.y, obj.x, obj.y, goal.x, goal.y]);
    obs.push(if state.holding.is_some() { 1.0 } else { 0.0 });
    let n_phases = spec.task.n_objects().max(1);
    obs.push(state.phase as f64 / n_phases as f64);
    for k in 0..spec.params.max_traps {
        if let Some(t) = state.traps.get(k) {
            let c = t.center();
            let (hw, hh) = t.half_extents();
            let (dx, dy) = (c.x - state.agent.x, c.y - state.agent.y);
            // signed clearance per axis; negative once overlapping that axis
            obs.extend([dx, dy, hw, hh, dx.abs() - hw, dy.abs() - hh]);
        } else {
            obs.extend([0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        }
    }
    obs.extend([
        obj.x - state.agent.x,
        obj.y - state.agent.y,
        goal.x - state.agent.x,
        goal.y - state.agent.y,
    ]);
    obs
}

/// Apply one timestep of an action chunk. Inputs are clipped, never
/// rejected; non-finite components are treated as zero. Terminal states
/// absorb. Returns the outcome after the step.
pub fn step(state: &mut EnvState, action: &[f64], spec: &TaskSpec) -> Outcome {
    if state.terminal() {
        return state.outcome;
    }
    let p = &spec.params;
    let dx = sanitize(action.first().copied().unwrap_or(0.0), p.max_step);
    let dy = sanitize(action.get(1).copied().unwrap_or(0.0), p.max_step);
    let gripper = {
        let g = action.get(2).copied().unwrap_or(0.0);
        if g.is_finite() {
            g.clamp(0.0, 1.0)
        } else {
            0.0
        }
    };

    state.agent = clamp01(state.agent.add(Vec2::new(dx, dy)));
    if let Some(i) = state.holding {
        state.objects[i] = state.agent;
    }

    // grasp/release: level rule on the gripper channel, active object only
    if spec.task.n_objects() > 0 {
        match state.holding {
            Some(_) if gripper < 0.5 => state.holding = None,
            None if gripper >= 0.5 => {
                let i = state.phase;
                if state.agent.dist(state.objects[i]) <= p.grasp_radius {
                    state.holding = Some(i);
                    state.objects[i] = state.agent;
                }
            }
            _ => {}
        }
    }

    // failure first: entering a trap while holding ends the episode
    if state.holding.is_some() && state.traps.iter().any(|t| t.contains(state.agent)) {
        state.outcome = Outcome::Failure;
        state.step_count += 1;
        return state.outcome;
    }

    // task predicate
    let done_phase = match spec.task {
        TaskId::Reach => state.agent.dist(state.goals[0]) <= p.goal_radius,
        _ => state.objects[state.phase].dist(state.goals[state.phase]) <= p.goal_radius,
    };
    if done_phase {
        if state.phase + 1 >= spec.task.n_objects().max(1) {
            state.outcome = Outcome::Success;
        } else {
            // sub-task complete: drop the object where it is, move on
            state.holding = None;
            state.phase += 1;
        }
    }

    state.step_count += 1;
    if state.outcome == Outcome::Running && state.step_count >= spec.horizon_limit {
        state.outcome = Outcome::Failure;
    }
    state.outcome
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: TaskId) -> TaskSpec {
        TaskSpec::new(task, EnvParams::default())
    }

    #[test]
    fn reset_is_deterministic_and_ignores_run_seed() {
        let s = spec(TaskId::PickPlace);
        let a = reset(&s, 7, 0);
        let b = reset(&s, 7, 123);
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_configs_have_distinct_poses() {
        let s = spec(TaskId::PickPlace);
        let states: Vec<EnvState> = (0..50).map(|c| reset(&s, c, 0)).collect();
        for i in 0..50 {
            for j in (i + 1)..50 {
                assert_ne!(
                    states[i].objects[0], states[j].objects[0],
                    "configs {i} and {j} share an object pose"
                );
            }
        }
    }

    #[test]
    fn reset_invariants_hold_over_many_configs() {
        for task in TaskId::ALL {
            let s = spec(task);
            let clearance = s.params.grasp_radius;
            for c in 0..2000u64 {
                let st = reset(&s, c, 0);
                assert_eq!(st.outcome, Outcome::Running);
                assert_eq!(st.objects.len(), task.n_objects());
                for pt in st.objects.iter().chain(st.goals.iter()) {
                    assert!(pt.x >= 0.0 && pt.x <= 1.0 && pt.y >= 0.0 && pt.y <= 1.0);
                    for t in &st.traps {
                        assert!(
                            !t.inflate(clearance).contains(*pt),
                            "config {c}: object/goal inside trap"
                        );
                    }
                }
                assert!(st.traps.len() <= s.params.max_traps);
            }
        }
    }

    #[test]
    fn zero_action_only_advances_the_clock() {
        let s = spec(TaskId::PickPlace);
        let mut st = reset(&s, 3, 0);
        let before = st.clone();
        step(&mut st, &[0.0, 0.0, 0.0], &s);
        assert_eq!(st.agent, before.agent);
        assert_eq!(st.objects, before.objects);
        assert_eq!(st.holding, before.holding);
        assert_eq!(st.step_count, before.step_count + 1);
    }

    #[test]
    fn carrying_into_a_trap_fails_immediately() {
        let s = spec(TaskId::PickPlace);
        let trap = Rect::from_center(Vec2::new(0.5, 0.5), 0.1, 0.1);
        let mut st = EnvState {
            agent: Vec2::new(0.38, 0.5),
            objects: vec![Vec2::new(0.38, 0.5)],
            goals: vec![Vec2::new(0.9, 0.9)],
            holding: Some(0),
            phase: 0,
            traps: vec![trap],
            step_count: 0,
            outcome: Outcome::Running,
        };
        let out = step(&mut st, &[0.05, 0.0, 1.0], &s);
        assert_eq!(out, Outcome::Failure);
    }

    #[test]
    fn walking_through_a_trap_unburdened_is_safe() {
        let s = spec(TaskId::PickPlace);
        let trap = Rect::from_center(Vec2::new(0.5, 0.5), 0.1, 0.1);
        let mut st = EnvState {
            agent: Vec2::new(0.46, 0.5),
            objects: vec![Vec2::new(0.9, 0.1)],
            goals: vec![Vec2::new(0.9, 0.9)],
            holding: None,
            phase: 0,
            traps: vec![trap],
            step_count: 0,
            outcome: Outcome::Running,
        };
        let out = step(&mut st, &[0.05, 0.0, 0.0], &s);
        assert_eq!(out, Outcome::Running);
    }

    #[test]
    fn grasp_requires_proximity_and_gripper() {
        let s = spec(TaskId::PickPlace);
        let mut st = EnvState {
            agent: Vec2::new(0.2, 0.2),
            objects: vec![Vec2::new(0.23, 0.2)],
            goals: vec![Vec2::new(0.8, 0.8)],
            holding: None,
            phase: 0,
            traps: vec![],
            step_count: 0,
            outcome: Outcome::Running,
        };
        // near but gripper low: no grasp
        step(&mut st, &[0.0, 0.0, 0.0], &s);
        assert_eq!(st.holding, None);
        // gripper high within radius: grasp, object snaps to agent
        step(&mut st, &[0.0, 0.0, 1.0], &s);
        assert_eq!(st.holding, Some(0));
        assert_eq!(st.objects[0], st.agent);
        // release
        step(&mut st, &[0.0, 0.0, 0.0], &s);
        assert_eq!(st.holding, None);
    }

    #[test]
    fn timeout_is_a_failure() {
        let s = spec(TaskId::PickPlace);
        let mut st = reset(&s, 11, 0);
        let mut out = Outcome::Running;
        for _ in 0..s.horizon_limit {
            out = step(&mut st, &[0.0, 0.0, 0.0], &s);
        }
        assert_eq!(out, Outcome::Failure);
        assert_eq!(st.step_count, s.horizon_limit);
        // terminal states absorb
        let frozen = st.clone();
        step(&mut st, &[0.05, 0.0, 0.0], &s);
        assert_eq!(st, frozen);
    }

    #[test]
    fn two_object_sequence_advances_phase_in_order() {
        let s = spec(TaskId::TwoObjectSequence);
        let mut st = EnvState {
            agent: Vec2::new(0.3, 0.3),
            objects: vec![Vec2::new(0.3, 0.3), Vec2::new(0.3, 0.7)],
            goals: vec![Vec2::new(0.33, 0.3), Vec2::new(0.7, 0.3)],
            holding: Some(0),
            phase: 0,
            traps: vec![],
            step_count: 0,
            outcome: Outcome::Running,
        };
        // carry object 0 into its goal: phase advances, hold released
        let out = step(&mut st, &[0.03, 0.0, 1.0], &s);
        assert_eq!(out, Outcome::Running);
        assert_eq!(st.phase, 1);
        assert_eq!(st.holding, None);
        // second object can only be grasped now (active object = 1)
        st.agent = Vec2::new(0.3, 0.7);
        step(&mut st, &[0.0, 0.0, 1.0], &s);
        assert_eq!(st.holding, Some(1));
    }

    #[test]
    fn outcome_exclusivity_success_beats_timeout_on_final_step() {
        let mut s = spec(TaskId::Reach);
        s.horizon_limit = 1;
        let mut st = EnvState {
            agent: Vec2::new(0.5, 0.5),
            objects: vec![],
            goals: vec![Vec2::new(0.53, 0.5)],
            holding: None,
            phase: 0,
            traps: vec![],
            step_count: 0,
            outcome: Outcome::Running,
        };
        let out = step(&mut st, &[0.03, 0.0], &s);
        assert_eq!(out, Outcome::Success);
    }
}
