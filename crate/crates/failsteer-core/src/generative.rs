//! Diffusion (DDPM) and flow-matching machinery: noise schedules, training
//! targets and losses, and the two samplers.
//!
//! The losses take the predictor as a closure and the samplers take a
//! [`ScoreFn`], so guidance composes without this module knowing about it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, CoreResult};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Intermediate sampler states are clamped to this band (normalized units)
/// to keep strongly-guided trajectories from blowing up.
pub const SAMPLE_CLAMP: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    Diffusion,
    Flow,
}

/// Generative-process configuration; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub mode: GenMode,
    pub n_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub n_euler_steps: usize,
}

impl GenConfig {
    pub fn diffusion(n_steps: usize) -> Self {
        GenConfig {
            mode: GenMode::Diffusion,
            n_steps,
            beta_min: 1e-4,
            beta_max: 0.02,
            n_euler_steps: 16,
        }
    }

    pub fn flow(n_euler_steps: usize) -> Self {
        GenConfig {
            mode: GenMode::Flow,
            n_steps: 50,
            beta_min: 1e-4,
            beta_max: 0.02,
            n_euler_steps,
        }
    }

    /// Number of sampler steps (and trainable conditioning steps) in the
    /// active mode.
    pub fn step_count(&self) -> usize {
        match self.mode {
            GenMode::Diffusion => self.n_steps,
            GenMode::Flow => self.n_euler_steps,
        }
    }

    pub fn schedule(&self) -> CoreResult<NoiseSchedule> {
        NoiseSchedule::linear(self.n_steps, self.beta_min, self.beta_max)
    }

    pub fn flow_config(&self) -> CoreResult<FlowConfig> {
        FlowConfig::uniform(self.n_euler_steps)
    }
}

/// DDPM variance schedule with derived `alpha` products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub n_steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> CoreResult<Self> {
        if betas.is_empty() {
            return Err(CoreError::Config("schedule needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(CoreError::Config(format!(
                "betas must lie in (0,1), got {betas:?}"
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            n_steps: betas.len(),
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Linear schedule from `beta_min` to `beta_max` inclusive.
    pub fn linear(n_steps: usize, beta_min: f64, beta_max: f64) -> CoreResult<Self> {
        if n_steps == 0 {
            return Err(CoreError::Config("n_steps must be positive".into()));
        }
        let betas = (0..n_steps)
            .map(|t| {
                if n_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * t as f64 / (n_steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }
}

/// Euler integration grid on [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub n_euler_steps: usize,
    pub t_grid: Vec<f64>,
}

impl FlowConfig {
    /// Uniform grid with `n` steps (`n + 1` grid points, endpoints 0 and 1).
    pub fn uniform(n: usize) -> CoreResult<Self> {
        if n == 0 {
            return Err(CoreError::Config("n_euler_steps must be positive".into()));
        }
        let t_grid = (0..=n).map(|k| k as f64 / n as f64).collect();
        Ok(FlowConfig {
            n_euler_steps: n,
            t_grid,
        })
    }

    pub fn from_grid(t_grid: Vec<f64>) -> CoreResult<Self> {
        let n = t_grid.len().saturating_sub(1);
        if n == 0 {
            return Err(CoreError::Config("t_grid needs at least two points".into()));
        }
        let endpoints_ok = t_grid[0] == 0.0 && *t_grid.last().unwrap() == 1.0;
        let increasing = t_grid.windows(2).all(|w| w[1] > w[0]);
        if !endpoints_ok || !increasing {
            return Err(CoreError::Config(format!(
                "t_grid must increase strictly from 0 to 1, got {t_grid:?}"
            )));
        }
        Ok(FlowConfig {
            n_euler_steps: n,
            t_grid,
        })
    }
}

/// Forward-noise a clean action chunk to step `step`:
/// `sqrt(alpha_bar) * action0 + sqrt(1 - alpha_bar) * noise`.
pub fn q_sample(
    action0: &Tensor,
    step: usize,
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> CoreResult<Tensor> {
    if step >= sched.n_steps {
        return Err(CoreError::Contract(format!(
            "q_sample step {step} out of range 0..{}",
            sched.n_steps
        )));
    }
    let ab = sched.alpha_bars[step];
    let a = action0.scale(libm::sqrt(ab))?;
    let n = noise.scale(libm::sqrt(1.0 - ab))?;
    a.add(&n)
}

/// Linear interpolation point and target velocity of the flow path at time
/// `t`: `a_t = (1 - t) * noise + t * action0`, velocity `action0 - noise`.
pub fn flow_point(action0: &Tensor, t: f64, noise: &Tensor) -> CoreResult<(Tensor, Tensor)> {
    let at = noise.scale(1.0 - t)?.add(&action0.scale(t)?)?;
    let v = action0.sub(noise)?;
    Ok((at, v))
}

/// Batch of noising targets for one training step.
pub struct NoisedBatch {
    /// Noised chunks, `[B, chunk_dim]`.
    pub noisy: Tensor,
    /// Regression target (noise for diffusion, velocity for flow), `[B, chunk_dim]`.
    pub target: Tensor,
    /// Conditioning step index per row.
    pub steps: Vec<usize>,
}

fn rows_to_tensor(rows: &[&[f64]]) -> CoreResult<Tensor> {
    let b = rows.len();
    let w = rows[0].len();
    let mut data = Vec::with_capacity(b * w);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(vec![b, w], data)
}

/// [`diffusion_batch`] with the step and noise draws supplied by the
/// caller, so two generators can be trained on identical draws.
pub fn diffusion_batch_from(
    chunks: &[&[f64]],
    sched: &NoiseSchedule,
    steps: &[usize],
    eps: &Tensor,
) -> CoreResult<NoisedBatch> {
    if chunks.is_empty() {
        return Err(CoreError::Contract("empty batch".into()));
    }
    let a0 = rows_to_tensor(chunks)?;
    let w = chunks[0].len();
    let mut noisy = Vec::with_capacity(a0.len());
    for (r, &step) in steps.iter().enumerate() {
        if step >= sched.n_steps {
            return Err(CoreError::Contract(format!(
                "step {step} out of range 0..{}",
                sched.n_steps
            )));
        }
        let ab = sched.alpha_bars[step];
        let (sa, sn) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        for c in 0..w {
            noisy.push(sa * a0.data()[r * w + c] + sn * eps.data()[r * w + c]);
        }
    }
    Ok(NoisedBatch {
        noisy: Tensor::new(a0.shape().to_vec(), noisy)?,
        target: eps.clone(),
        steps: steps.to_vec(),
    })
}

/// Draw per-row diffusion steps and noise for `chunks` (normalized,
/// `[B, chunk_dim]` as row slices).
pub fn diffusion_batch(
    chunks: &[&[f64]],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> CoreResult<NoisedBatch> {
    if chunks.is_empty() {
        return Err(CoreError::Contract("empty batch".into()));
    }
    let steps: Vec<usize> = (0..chunks.len())
        .map(|_| rng.random_range(0..sched.n_steps))
        .collect();
    let eps = Tensor::standard_normal(vec![chunks.len(), chunks[0].len()], rng);
    diffusion_batch_from(chunks, sched, &steps, &eps)
}

/// [`flow_batch`] with the step and noise draws supplied by the caller.
pub fn flow_batch_from(
    chunks: &[&[f64]],
    cfg: &FlowConfig,
    steps: &[usize],
    noise: &Tensor,
) -> CoreResult<NoisedBatch> {
    if chunks.is_empty() {
        return Err(CoreError::Contract("empty batch".into()));
    }
    let a0 = rows_to_tensor(chunks)?;
    let w = chunks[0].len();
    let mut at = Vec::with_capacity(a0.len());
    let mut target = Vec::with_capacity(a0.len());
    for (r, &step) in steps.iter().enumerate() {
        if step >= cfg.n_euler_steps {
            return Err(CoreError::Contract(format!(
                "step {step} out of range 0..{}",
                cfg.n_euler_steps
            )));
        }
        let t = cfg.t_grid[step];
        for c in 0..w {
            let (x0, z) = (a0.data()[r * w + c], noise.data()[r * w + c]);
            at.push((1.0 - t) * z + t * x0);
            target.push(x0 - z);
        }
    }
    Ok(NoisedBatch {
        noisy: Tensor::new(a0.shape().to_vec(), at)?,
        target: Tensor::new(a0.shape().to_vec(), target)?,
        steps: steps.to_vec(),
    })
}

/// Flow-matching analogue of [`diffusion_batch`]: steps are drawn uniformly
/// over the Euler grid and the target is the path velocity.
pub fn flow_batch(chunks: &[&[f64]], cfg: &FlowConfig, rng: &mut Rng) -> CoreResult<NoisedBatch> {
    if chunks.is_empty() {
        return Err(CoreError::Contract("empty batch".into()));
    }
    let steps: Vec<usize> = (0..chunks.len())
        .map(|_| rng.random_range(0..cfg.n_euler_steps))
        .collect();
    let noise = Tensor::standard_normal(vec![chunks.len(), chunks[0].len()], rng);
    flow_batch_from(chunks, cfg, &steps, &noise)
}

/// Mean over the batch of the squared L2 error between the predictor output
/// and the regression target. `predict` receives the noised batch and the
/// per-row step indices and must return a `[B, chunk_dim]` prediction var.
pub fn generative_loss<F>(tape: &mut Tape, batch: &NoisedBatch, predict: F) -> CoreResult<Var>
where
    F: FnOnce(&mut Tape, &Tensor, &[usize]) -> CoreResult<Var>,
{
    let b = batch.noisy.shape()[0];
    let pred = predict(tape, &batch.noisy, &batch.steps)?;
    let target = tape.constant(batch.target.clone());
    let sq = tape.sq_err(pred, target)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / b as f64)
}

/// Per-step score/velocity oracle driving the samplers. `step` counts down
/// over the schedule in diffusion mode and indexes the Euler grid in flow
/// mode.
pub trait ScoreFn {
    fn eval(&mut self, a: &Tensor, step: usize) -> CoreResult<Tensor>;
}

impl<F> ScoreFn for F
where
    F: FnMut(&Tensor, usize) -> CoreResult<Tensor>,
{
    fn eval(&mut self, a: &Tensor, step: usize) -> CoreResult<Tensor> {
        self(a, step)
    }
}

/// Bookkeeping from one sampling run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleInfo {
    /// Number of sampler steps on which the clamp fired.
    pub clamped_steps: usize,
}

fn checked_score(
    score: &mut dyn ScoreFn,
    a: &Tensor,
    step: usize,
    chunk_dim: usize,
) -> CoreResult<Tensor> {
    let out = score.eval(a, step)?;
    if out.len() != chunk_dim {
        return Err(CoreError::Shape {
            op: "score_fn",
            left: out.shape().to_vec(),
            right: vec![chunk_dim],
        });
    }
    out.check_finite("score_fn")?;
    Ok(out)
}

/// Ancestral DDPM sampling with the callback as noise predictor. Returns a
/// chunk in normalized units.
pub fn sample_diffusion(
    score: &mut dyn ScoreFn,
    chunk_dim: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> CoreResult<(Tensor, SampleInfo)> {
    let mut x = Tensor::standard_normal(vec![chunk_dim], rng);
    let mut info = SampleInfo::default();
    for t in (0..sched.n_steps).rev() {
        let eps = checked_score(score, &x, t, chunk_dim)?;
        let (beta, alpha, ab) = (sched.betas[t], sched.alphas[t], sched.alpha_bars[t]);
        let coeff = beta / libm::sqrt(1.0 - ab);
        let mean = x.sub(&eps.scale(coeff)?)?.scale(1.0 / libm::sqrt(alpha))?;
        x = if t > 0 {
            let z = Tensor::standard_normal(vec![chunk_dim], rng);
            mean.add(&z.scale(libm::sqrt(beta))?)?
        } else {
            mean
        };
        let (clamped, n) = x.clamp(-SAMPLE_CLAMP, SAMPLE_CLAMP);
        if n > 0 {
            info.clamped_steps += 1;
        }
        x = clamped;
    }
    Ok((x, info))
}

/// Forward-Euler integration of the callback velocity field from standard
/// normal noise at t=0 to t=1. Returns a chunk in normalized units.
pub fn sample_flow(
    score: &mut dyn ScoreFn,
    chunk_dim: usize,
    cfg: &FlowConfig,
    rng: &mut Rng,
) -> CoreResult<(Tensor, SampleInfo)> {
    let mut x = Tensor::standard_normal(vec![chunk_dim], rng);
    let mut info = SampleInfo::default();
    for k in 0..cfg.n_euler_steps {
        let v = checked_score(score, &x, k, chunk_dim)?;
        let dt = cfg.t_grid[k + 1] - cfg.t_grid[k];
        x = x.add(&v.scale(dt)?)?;
        let (clamped, n) = x.clamp(-SAMPLE_CLAMP, SAMPLE_CLAMP);
        if n > 0 {
            info.clamped_steps += 1;
        }
        x = clamped;
    }
    Ok((x, info))
}

/// Mode dispatch over [`sample_diffusion`] / [`sample_flow`].
pub fn sample_chunk(
    score: &mut dyn ScoreFn,
    chunk_dim: usize,
    gen: &GenConfig,
    rng: &mut Rng,
) -> CoreResult<(Tensor, SampleInfo)> {
    match gen.mode {
        GenMode::Diffusion => sample_diffusion(score, chunk_dim, &gen.schedule()?, rng),
        GenMode::Flow => sample_flow(score, chunk_dim, &gen.flow_config()?, rng),
    }
}
