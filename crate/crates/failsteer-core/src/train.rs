//! Stage trainers: success-only training of (trunk, success head) and joint
//! dual-generator training with alternating success/failure batches.
//!
//! Divergence policy: any non-finite value surfacing during a step restores
//! the parameters from the step boundary and stops training, keeping the
//! last good model.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand::SeedableRng as _;

use crate::autodiff::Tape;
use crate::data::{Dataset, FailureChunking, TrainPair};
use crate::error::{CoreError, CoreResult};
use crate::generative::{
    diffusion_batch_from, flow_batch_from, generative_loss, FlowConfig, GenMode, NoiseSchedule,
    NoisedBatch,
};
use crate::model::{forward_batch, register_head_vars, DagModel, Head};
use crate::optim::{adam_step, AdamState};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub freeze_trunk: bool,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            lr: 1e-3,
            batch_size: 128,
            steps: 20_000,
            seed: 0,
            freeze_trunk: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DagTrainLog {
    pub success_losses: Vec<f64>,
    pub failure_losses: Vec<f64>,
    pub diverged: bool,
}

/// Adam states per parameter tensor. The trunk states are shared between the
/// two heads' updates.
struct DagAdam {
    trunk: Vec<AdamState>,
    success: Vec<AdamState>,
    failure: Vec<AdamState>,
}

impl DagAdam {
    fn new(model: &DagModel, lr: f64) -> CoreResult<Self> {
        let mk = |tensors: [&Tensor; 4]| -> CoreResult<Vec<AdamState>> {
            tensors
                .into_iter()
                .map(|t| AdamState::new(t.len(), lr))
                .collect()
        };
        Ok(DagAdam {
            trunk: mk(model.params.trunk.tensors())?,
            success: mk(model.params.success_head.tensors())?,
            failure: mk(model.params.failure_head.tensors())?,
        })
    }

    fn head_states(&mut self, head: Head) -> (&mut Vec<AdamState>, &mut Vec<AdamState>) {
        match head {
            Head::Success => (&mut self.trunk, &mut self.success),
            Head::Failure => (&mut self.trunk, &mut self.failure),
        }
    }
}

/// Per-step randomness, drawn once and shared by the success and failure
/// updates of one alternation step. Identical supervision with identical
/// draws makes the two heads converge to matching functions.
struct StepDraws {
    raw_idx: Vec<u64>,
    steps: Vec<usize>,
    eps: Tensor,
}

impl StepDraws {
    fn draw(b: usize, chunk_dim: usize, step_count: usize, rng: &mut Rng) -> Self {
        StepDraws {
            raw_idx: (0..b).map(|_| rng.random()).collect(),
            steps: (0..b).map(|_| rng.random_range(0..step_count)).collect(),
            eps: Tensor::standard_normal(vec![b, chunk_dim], rng),
        }
    }
}

fn noised(
    rows: &[&[f64]],
    mode: GenMode,
    sched: &NoiseSchedule,
    flow: &FlowConfig,
    draws: &StepDraws,
) -> CoreResult<NoisedBatch> {
    match mode {
        GenMode::Diffusion => diffusion_batch_from(rows, sched, &draws.steps, &draws.eps),
        GenMode::Flow => flow_batch_from(rows, flow, &draws.steps, &draws.eps),
    }
}

/// One optimizer step of `head` (and, unless frozen, the trunk) on the batch
/// selected by `draws`. Returns the scalar loss.
fn train_step(
    model: &mut DagModel,
    head: Head,
    pairs: &[TrainPair],
    opt: &OptConfig,
    sched: &NoiseSchedule,
    flow: &FlowConfig,
    adam: &mut DagAdam,
    draws: &StepDraws,
) -> CoreResult<f64> {
    let cfg = model.config.clone();
    let b = draws.raw_idx.len();

    let mut obs = Vec::with_capacity(b * cfg.obs_dim);
    let mut task = Vec::with_capacity(b * cfg.task_dim);
    let mut rows: Vec<&[f64]> = Vec::with_capacity(b);
    for &r in &draws.raw_idx {
        let p = &pairs[(r % pairs.len() as u64) as usize];
        obs.extend_from_slice(&p.obs);
        let mut one_hot = vec![0.0; cfg.task_dim];
        one_hot[p.task_index] = 1.0;
        task.extend_from_slice(&one_hot);
        rows.push(&p.chunk);
    }
    let batch = noised(&rows, model.gen.mode, sched, flow, draws)?;

    let mut tape = Tape::new();
    let vars = register_head_vars(&mut tape, &model.params, head, !opt.freeze_trunk, true);
    let obs_v = tape.constant(Tensor::new(vec![b, cfg.obs_dim], obs)?);
    let task_v = tape.constant(Tensor::new(vec![b, cfg.task_dim], task)?);
    let loss = generative_loss(&mut tape, &batch, |tape, noisy, steps| {
        let noisy_v = tape.constant(noisy.clone());
        forward_batch(tape, &cfg, &vars, obs_v, task_v, steps, noisy_v)
    })?;
    let loss_val = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;

    let (trunk_states, head_states) = adam.head_states(head);
    let trunk_tensors = model.params.trunk.tensors_mut();
    let order = vars.in_order();
    for ((var, tensor), state) in order[..4]
        .iter()
        .zip(trunk_tensors)
        .zip(trunk_states.iter_mut())
    {
        if let Some(g) = grads.get(*var) {
            adam_step(tensor.data_mut(), g, state)?;
        }
    }
    let head_tensors = model.params.head_mut(head).tensors_mut();
    for ((var, tensor), state) in order[4..]
        .iter()
        .zip(head_tensors)
        .zip(head_states.iter_mut())
    {
        if let Some(g) = grads.get(*var) {
            adam_step(tensor.data_mut(), g, state)?;
        }
    }
    Ok(loss_val)
}

fn validate_pairs(model: &DagModel, pairs: &[TrainPair], split: &str) -> CoreResult<()> {
    let Some(first) = pairs.first() else {
        return Err(CoreError::Data(alloc::format!("{split} split is empty")));
    };
    if first.obs.len() != model.config.obs_dim || first.chunk.len() != model.config.chunk_dim() {
        return Err(CoreError::Config(alloc::format!(
            "{split} pair dims (obs {}, chunk {}) do not match model (obs {}, chunk {})",
            first.obs.len(),
            first.chunk.len(),
            model.config.obs_dim,
            model.config.chunk_dim()
        )));
    }
    Ok(())
}

/// Train (trunk, success head) on the success split; the failure head is
/// untouched. `chunking` matters only for corrected trajectories in the
/// split.
pub fn train_success_only(
    ds: &Dataset,
    model: &mut DagModel,
    opt: &OptConfig,
    chunking: FailureChunking,
) -> CoreResult<TrainLog> {
    let pairs = ds.training_pairs(model.config.horizon, &model.stats, chunking)?;
    train_success_on_pairs(&pairs, model, opt)
}

/// [`train_success_only`] over pre-materialized pairs.
pub fn train_success_on_pairs(
    pairs: &[TrainPair],
    model: &mut DagModel,
    opt: &OptConfig,
) -> CoreResult<TrainLog> {
    validate_pairs(model, pairs, "success")?;
    let sched = model.gen.schedule()?;
    let flow = model.gen.flow_config()?;
    let step_count = model.gen.step_count();
    let chunk_dim = model.config.chunk_dim();
    // sampling is with replacement; small splits simply repeat
    let b = opt.batch_size.max(1);
    let mut adam = DagAdam::new(model, opt.lr)?;
    let mut rng = Rng::seed_from_u64(derive_seed(opt.seed, &[0x5f_5f]));
    let mut log = TrainLog::default();
    for _ in 0..opt.steps {
        let snapshot = model.params.clone();
        let draws = StepDraws::draw(b, chunk_dim, step_count, &mut rng);
        match train_step(model, Head::Success, pairs, opt, &sched, &flow, &mut adam, &draws) {
            Ok(l) if l.is_finite() => log.losses.push(l),
            Ok(_) | Err(CoreError::Numeric { .. }) => {
                model.params = snapshot;
                log.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(log)
}

/// Joint dual-generator training: per outer step, one success batch updates
/// (trunk, success head), then one failure batch updates (trunk, failure
/// head). The smaller split simply resamples.
pub fn train_dag(
    ds: &Dataset,
    df: &Dataset,
    model: &mut DagModel,
    opt: &OptConfig,
    chunking: FailureChunking,
) -> CoreResult<DagTrainLog> {
    let pairs_s = ds.training_pairs(model.config.horizon, &model.stats, chunking)?;
    let pairs_f = df.training_pairs(model.config.horizon, &model.stats, chunking)?;
    train_dag_on_pairs(&pairs_s, &pairs_f, model, opt)
}

/// [`train_dag`] over pre-materialized pairs.
pub fn train_dag_on_pairs(
    pairs_s: &[TrainPair],
    pairs_f: &[TrainPair],
    model: &mut DagModel,
    opt: &OptConfig,
) -> CoreResult<DagTrainLog> {
    validate_pairs(model, pairs_s, "success")?;
    validate_pairs(model, pairs_f, "failure")?;
    let sched = model.gen.schedule()?;
    let flow = model.gen.flow_config()?;
    let step_count = model.gen.step_count();
    let chunk_dim = model.config.chunk_dim();
    let b = opt.batch_size.max(1);
    let mut adam = DagAdam::new(model, opt.lr)?;
    let mut rng = Rng::seed_from_u64(derive_seed(opt.seed, &[0xda_6]));
    let mut log = DagTrainLog::default();
    for _ in 0..opt.steps {
        let snapshot = model.params.clone();
        let draws = StepDraws::draw(b, chunk_dim, step_count, &mut rng);
        let s = train_step(model, Head::Success, pairs_s, opt, &sched, &flow, &mut adam, &draws);
        let f = match &s {
            Ok(l) if l.is_finite() => {
                train_step(model, Head::Failure, pairs_f, opt, &sched, &flow, &mut adam, &draws)
            }
            _ => Ok(f64::NAN),
        };
        match (s, f) {
            (Ok(ls), Ok(lf)) if ls.is_finite() && lf.is_finite() => {
                log.success_losses.push(ls);
                log.failure_losses.push(lf);
            }
            (Err(CoreError::Numeric { .. }), _)
            | (_, Err(CoreError::Numeric { .. }))
            | (Ok(_), Ok(_)) => {
                model.params = snapshot;
                log.diverged = true;
                break;
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{TrajOutcome, TrajStep, Trajectory};
    use crate::env::TaskId;
    use crate::generative::GenConfig;
    use crate::model::ModelConfig;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            obs_dim: 3,
            task_dim: 3,
            action_dim: 2,
            horizon: 2,
            hidden_dim: 16,
            step_embed_dim: 8,
            init_seed: seed,
        }
    }

    fn tiny_traj(uid: u64, outcome: TrajOutcome) -> Trajectory {
        let steps = (0..6)
            .map(|i| TrajStep {
                obs: vec![0.1 * i as f64, 0.5, -0.2],
                action: vec![0.01 * i as f64 - 0.02, 0.03],
            })
            .collect();
        Trajectory {
            uid,
            task: TaskId::PickPlace,
            config_id: uid,
            seed: uid,
            steps,
            outcome,
            correction_start: None,
            numeric_fault: false,
            lambda_log: None,
        }
    }

    fn setup(seed: u64) -> (Dataset, Dataset, DagModel) {
        let trajs: Vec<Trajectory> = (0..4)
            .map(|i| {
                tiny_traj(
                    i,
                    if i % 2 == 0 {
                        TrajOutcome::Success
                    } else {
                        TrajOutcome::Failure
                    },
                )
            })
            .collect();
        let (ds, df, stats) = crate::data::build_datasets(trajs).unwrap();
        let model =
            DagModel::init(tiny_config(seed), GenConfig::diffusion(8), stats).unwrap();
        (ds, df, model)
    }

    fn opt(steps: usize) -> OptConfig {
        OptConfig {
            lr: 1e-3,
            batch_size: 8,
            steps,
            seed: 1,
            freeze_trunk: false,
        }
    }

    #[test]
    fn success_training_leaves_failure_head_bitwise_unchanged() {
        let (ds, _df, mut model) = setup(5);
        let before = model.params.failure_head.clone();
        let trunk_before = model.params.trunk.clone();
        let log = train_success_only(&ds, &mut model, &opt(25), FailureChunking::Full).unwrap();
        assert_eq!(log.losses.len(), 25);
        assert!(!log.diverged);
        assert_eq!(model.params.failure_head, before);
        assert_ne!(model.params.trunk, trunk_before, "trunk should move");
    }

    #[test]
    fn dag_alternation_preserves_per_step_isolation() {
        let (ds, df, mut model) = setup(6);
        // after a success-only phase, a single failure step must not touch
        // the success head
        train_success_only(&ds, &mut model, &opt(5), FailureChunking::Full).unwrap();
        let succ_before = model.params.success_head.clone();
        let pairs_f = df
            .training_pairs(model.config.horizon, &model.stats, FailureChunking::Full)
            .unwrap();
        let sched = model.gen.schedule().unwrap();
        let flow = model.gen.flow_config().unwrap();
        let mut adam = DagAdam::new(&model, 1e-3).unwrap();
        let mut rng = Rng::seed_from_u64(3);
        let draws = StepDraws::draw(8, model.config.chunk_dim(), model.gen.step_count(), &mut rng);
        train_step(
            &mut model,
            Head::Failure,
            &pairs_f,
            &opt(1),
            &sched,
            &flow,
            &mut adam,
            &draws,
        )
        .unwrap();
        assert_eq!(model.params.success_head, succ_before);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let run = || {
            let (ds, df, mut model) = setup(7);
            train_dag(&ds, &df, &mut model, &opt(20), FailureChunking::Full).unwrap();
            model
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_trunk_stays_bitwise_constant() {
        let (ds, df, mut model) = setup(8);
        let trunk_before = model.params.trunk.clone();
        let mut o = opt(15);
        o.freeze_trunk = true;
        let log = train_dag(&ds, &df, &mut model, &o, FailureChunking::Full).unwrap();
        assert!(!log.diverged);
        assert_eq!(model.params.trunk, trunk_before);
        assert_ne!(model.params.success_head.l2.weight.data(), {
            let fresh = setup(8).2;
            fresh.params.success_head.l2.weight.data().to_vec()
        });
    }

    #[test]
    fn empty_split_is_a_data_error() {
        let (ds, _df, mut model) = setup(9);
        let empty = Dataset::default();
        assert!(matches!(
            train_dag(&ds, &empty, &mut model, &opt(1), FailureChunking::Full),
            Err(CoreError::Data(_))
        ));
        assert!(matches!(
            train_success_only(&empty, &mut model, &opt(1), FailureChunking::Full),
            Err(CoreError::Data(_))
        ));
    }
}
