//! Chunk-emitting policies: the scripted expert, its noise-perturbed
//! variant, and the guided generative policy over a trained model.

use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::env::{expert::expert_chunk, EnvState, Outcome, TaskSpec, Vec2};
use crate::env::geom::Rect;
use crate::error::{CoreError, CoreResult};
use crate::generative::sample_chunk;
use crate::guidance::{make_score_fn, GuidanceSpec, LambdaSample};
use crate::model::DagModel;
use crate::rng::Rng;

/// One policy query: the action rows to execute open-loop plus the guidance
/// trace recorded while sampling them.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedChunk {
    pub actions: Vec<Vec<f64>>,
    pub trace: Vec<LambdaSample>,
    pub clamped_steps: usize,
}

/// Maps a raw observation to an action chunk (env units).
pub trait Policy {
    fn plan(&mut self, obs: &[f64], rng: &mut Rng) -> CoreResult<PlannedChunk>;
}

/// Rebuild the expert's working view from the fixed observation layout.
fn workspace_from_obs(obs: &[f64], spec: &TaskSpec) -> CoreResult<EnvState> {
    if obs.len() != spec.obs_dim() {
        return Err(CoreError::Shape {
            op: "workspace_from_obs",
            left: alloc::vec![obs.len()],
            right: alloc::vec![spec.obs_dim()],
        });
    }
    let agent = Vec2::new(obs[0], obs[1]);
    let object = Vec2::new(obs[2], obs[3]);
    let goal = Vec2::new(obs[4], obs[5]);
    let holding = obs[6] > 0.5;
    let mut traps = Vec::new();
    for k in 0..spec.params.max_traps {
        let base = 8 + 6 * k;
        // trap centers are observed relative to the agent
        let (dx, dy, hw, hh) = (obs[base], obs[base + 1], obs[base + 2], obs[base + 3]);
        if hw > 0.0 && hh > 0.0 {
            traps.push(Rect::from_center(
                Vec2::new(agent.x + dx, agent.y + dy),
                hw,
                hh,
            ));
        }
    }
    let has_object = spec.task.n_objects() > 0;
    Ok(EnvState {
        agent,
        objects: if has_object { alloc::vec![object] } else { Vec::new() },
        goals: alloc::vec![goal],
        holding: if holding && has_object { Some(0) } else { None },
        phase: 0,
        traps,
        step_count: 0,
        outcome: Outcome::Running,
    })
}

/// Scripted expert wrapped as a chunk policy. Deterministic; the RNG is
/// untouched.
pub struct ExpertPolicy {
    pub spec: TaskSpec,
    pub chunk_len: usize,
}

impl Policy for ExpertPolicy {
    fn plan(&mut self, obs: &[f64], _rng: &mut Rng) -> CoreResult<PlannedChunk> {
        let ws = workspace_from_obs(obs, &self.spec)?;
        let actions = expert_chunk(&ws, &self.spec, self.chunk_len)?;
        Ok(PlannedChunk {
            actions,
            trace: Vec::new(),
            clamped_steps: 0,
        })
    }
}

/// Expert with per-step Gaussian noise on the movement channels; the
/// bootstrap failure generator.
pub struct NoisyExpertPolicy {
    pub inner: ExpertPolicy,
    pub sigma: f64,
}

impl Policy for NoisyExpertPolicy {
    fn plan(&mut self, obs: &[f64], rng: &mut Rng) -> CoreResult<PlannedChunk> {
        let mut chunk = self.inner.plan(obs, rng)?;
        for row in &mut chunk.actions {
            for v in row.iter_mut().take(2) {
                let z: f64 = rng.sample(StandardNormal);
                *v += self.sigma * z;
            }
        }
        Ok(chunk)
    }
}

/// Guided sampling from a trained dual-generator checkpoint.
pub struct GenerativePolicy<'m> {
    pub model: &'m DagModel,
    pub guidance: GuidanceSpec,
    pub task_index: usize,
}

impl Policy for GenerativePolicy<'_> {
    fn plan(&mut self, obs: &[f64], rng: &mut Rng) -> CoreResult<PlannedChunk> {
        let mut score = make_score_fn(self.model, obs, self.task_index, &self.guidance)?;
        let (chunk_norm, info) =
            sample_chunk(&mut score, self.model.chunk_dim(), &self.model.gen, rng)?;
        let raw = self.model.stats.denormalize_chunk(chunk_norm.data());
        let d = self.model.config.action_dim;
        let actions = raw.chunks(d).map(|r| r.to_vec()).collect();
        Ok(PlannedChunk {
            actions,
            trace: score.trace,
            clamped_steps: info.clamped_steps,
        })
    }
}
