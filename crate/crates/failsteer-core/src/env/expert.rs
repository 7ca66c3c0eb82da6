//! Scripted waypoint expert: visibility-graph shortest paths around traps,
//! grasp, carry, deliver. Pure function of the environment state.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};

use super::geom::{visibility_path, Vec2};
use super::{observe, step, EnvState, Outcome, TaskId, TaskSpec};

/// Stop the approach leg once within this fraction of the grasp radius.
const APPROACH_FRAC: f64 = 0.75;
/// Walk the carry leg to within this fraction of the goal radius.
const GOAL_FRAC: f64 = 0.5;

/// Positions walked along `waypoints` from `from` at `speed` per step,
/// stopping early once within `stop_within` of `stop_at` (if given).
fn walk(
    from: Vec2,
    waypoints: &[Vec2],
    speed: f64,
    stop_at: Option<(Vec2, f64)>,
) -> Vec<Vec2> {
    let mut pos = from;
    let mut out = Vec::new();
    let reached = |p: Vec2| match stop_at {
        Some((target, r)) => p.dist(target) <= r,
        None => false,
    };
    if reached(pos) {
        return out;
    }
    for &wp in waypoints {
        while pos.dist(wp) > 1e-9 {
            let step_len = speed.min(pos.dist(wp));
            pos = pos.add(pos.dir_to(wp).scale(step_len));
            out.push(pos);
            if reached(pos) {
                return out;
            }
            if out.len() > 10_000 {
                return out; // safety valve; callers bound script length
            }
        }
    }
    out
}

fn positions_to_actions(
    from: Vec2,
    positions: &[Vec2],
    grip: impl Fn(usize, Vec2) -> Option<f64>,
) -> Vec<Vec<f64>> {
    let mut prev = from;
    let mut rows = Vec::with_capacity(positions.len());
    for (i, &p) in positions.iter().enumerate() {
        let d = p.sub(prev);
        let mut row = vec![d.x, d.y];
        if let Some(g) = grip(i, p) {
            row.push(g);
        }
        rows.push(row);
        prev = p;
    }
    rows
}

/// If `pos` sits inside a test-inflated trap (where the planner has no
/// clear edges), the nearest exit point that clears every inflated trap at
/// once; otherwise `pos` unchanged. Overlapping traps make iterative
/// single-rect pushes oscillate, so all axis exits of all rects are ranked
/// together. With `avoid_raw` (set while holding, when trap interiors are
/// lethal) exits whose straight segment crosses a raw trap are discarded.
fn escape_point(
    pos: Vec2,
    traps: &[super::geom::Rect],
    test_margin: f64,
    avoid_raw: bool,
) -> Option<Vec2> {
    let test: Vec<super::geom::Rect> = traps.iter().map(|t| t.inflate(test_margin)).collect();
    if test.iter().all(|t| !t.contains(pos)) {
        return Some(pos);
    }
    let slack = 0.01;
    let mut cands: Vec<Vec2> = Vec::new();
    for r in &test {
        cands.extend([
            Vec2::new(r.min.x - slack, pos.y),
            Vec2::new(r.max.x + slack, pos.y),
            Vec2::new(pos.x, r.min.y - slack),
            Vec2::new(pos.x, r.max.y + slack),
        ]);
    }
    // last-resort anchors; trap placement keeps arena corners clear
    cands.extend([
        Vec2::new(0.05, 0.05),
        Vec2::new(0.95, 0.05),
        Vec2::new(0.05, 0.95),
        Vec2::new(0.95, 0.95),
    ]);
    cands.retain(|c| {
        c.x >= 0.0
            && c.x <= 1.0
            && c.y >= 0.0
            && c.y <= 1.0
            && test.iter().all(|t| !t.contains(*c))
    });
    if avoid_raw {
        cands.retain(|c| {
            traps
                .iter()
                .all(|t| !super::geom::segment_hits_rect(pos, *c, t))
        });
    }
    cands
        .into_iter()
        .min_by(|a, b| pos.dist(*a).total_cmp(&pos.dist(*b)))
}

/// Action script that finishes the current sub-task (approach + grasp +
/// carry, or just carry when already holding). Re-plan after phase changes.
pub fn expert_script(state: &EnvState, spec: &TaskSpec) -> CoreResult<Vec<Vec<f64>>> {
    let p = &spec.params;
    let speed = p.expert_speed * p.max_step;
    let rho = p.grasp_radius;
    let plan = |from: Vec2, to: Vec2| {
        visibility_path(from, to, &state.traps, rho, rho * 0.5).ok_or(CoreError::Plan)
    };

    // planner nodes are only guaranteed reachable from outside the
    // test-inflated traps; sidestep out first when drift left us inside one
    let free = escape_point(
        state.agent,
        &state.traps,
        rho * 0.5,
        state.holding.is_some(),
    )
    .ok_or(CoreError::Plan)?;
    let route = |to: Vec2| -> CoreResult<Vec<Vec2>> {
        let mut wps = alloc::vec![free];
        wps.extend_from_slice(&plan(free, to)?[1..]);
        Ok(wps)
    };

    if spec.task == TaskId::Reach {
        let goal = state.goals[0];
        let positions = walk(
            state.agent,
            &route(goal)?,
            speed,
            Some((goal, p.goal_radius * GOAL_FRAC)),
        );
        return Ok(positions_to_actions(state.agent, &positions, |_, _| None));
    }

    let object = state.objects[state.phase];
    let goal = state.goals[state.phase];
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let carry_from;

    if state.holding == Some(state.phase) {
        carry_from = state.agent;
    } else {
        // approach leg, gripper low until the landing step
        let positions = walk(
            state.agent,
            &route(object)?,
            speed,
            Some((object, rho * APPROACH_FRAC)),
        );
        if positions.is_empty() {
            // already close enough: grasp in place
            rows.push(vec![0.0, 0.0, 1.0]);
            carry_from = state.agent;
        } else {
            let last = positions.len() - 1;
            rows.extend(positions_to_actions(state.agent, &positions, |i, _| {
                Some(if i == last { 1.0 } else { 0.0 })
            }));
            carry_from = positions[last];
        }
    }

    // carry leg, gripper held high
    let carry_free =
        escape_point(carry_from, &state.traps, rho * 0.5, true).ok_or(CoreError::Plan)?;
    let mut carry_wps = alloc::vec![carry_free];
    carry_wps.extend_from_slice(&plan(carry_free, goal)?[1..]);
    let positions = walk(
        carry_from,
        &carry_wps,
        speed,
        Some((goal, p.goal_radius * GOAL_FRAC)),
    );
    rows.extend(positions_to_actions(carry_from, &positions, |_, _| Some(1.0)));
    if rows.is_empty() {
        // nothing to do but let the predicate fire
        rows.push(vec![0.0, 0.0, 1.0]);
    }
    Ok(rows)
}

/// First `h` expert actions, padded with hold-in-place rows.
pub fn expert_chunk(state: &EnvState, spec: &TaskSpec, h: usize) -> CoreResult<Vec<Vec<f64>>> {
    let mut rows = expert_script(state, spec)?;
    rows.truncate(h);
    let pad_grip = rows
        .last()
        .and_then(|r| r.get(2).copied())
        .unwrap_or(if state.holding.is_some() { 1.0 } else { 0.0 });
    while rows.len() < h {
        let mut row = vec![0.0, 0.0];
        if spec.task.action_dim() == 3 {
            row.push(pad_grip);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Run the expert closed-loop (re-planning after each script or phase
/// change) until the episode ends. Returns the per-step `(obs, action)`
/// records on success, `Plan` error otherwise.
pub fn simulate_expert(
    state0: &EnvState,
    spec: &TaskSpec,
) -> CoreResult<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut state = state0.clone();
    let mut records = Vec::new();
    for _replan in 0..12 {
        if state.terminal() {
            break;
        }
        let phase_before = state.phase;
        let script = expert_script(&state, spec)?;
        for row in script {
            let obs = observe(&state, spec);
            step(&mut state, &row, spec);
            records.push((obs, row));
            if state.terminal() || state.phase != phase_before {
                break;
            }
        }
    }
    if state.outcome == Outcome::Success {
        Ok(records)
    } else {
        Err(CoreError::Plan)
    }
}
