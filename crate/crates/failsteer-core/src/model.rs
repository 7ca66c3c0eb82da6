//! Dual-generator model: a shared trunk encoding (observation, task,
//! step) and two architecturally identical generator heads.
//!
//! The trunk consumes `[obs, task one-hot, sinusoidal(step)]` and produces a
//! feature vector `h`; each head consumes `[h, noisy action chunk]` and
//! predicts noise (diffusion mode) or velocity (flow mode) for the full
//! `action_dim * horizon` chunk. Head final layers start at zero so an
//! untrained model predicts zero.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng as _};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::DataStats;
use crate::error::{CoreError, CoreResult};
use crate::generative::GenConfig;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub task_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub hidden_dim: usize,
    pub step_embed_dim: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn chunk_dim(&self) -> usize {
        self.action_dim * self.horizon
    }

    pub fn trunk_in_dim(&self) -> usize {
        self.obs_dim + self.task_dim + self.step_embed_dim
    }

    pub fn head_in_dim(&self) -> usize {
        self.hidden_dim + self.chunk_dim()
    }

    pub fn validate(&self) -> CoreResult<()> {
        let dims = [
            self.obs_dim,
            self.task_dim,
            self.action_dim,
            self.horizon,
            self.hidden_dim,
            self.step_embed_dim,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(CoreError::Config(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if self.step_embed_dim % 2 != 0 {
            return Err(CoreError::Config(
                "step_embed_dim must be even (sin/cos pairs)".into(),
            ));
        }
        Ok(())
    }
}

/// Conditioning for one generator query.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// Normalized observation, length `obs_dim`.
    pub observation: Vec<f64>,
    /// One-hot task vector, length `task_dim`.
    pub task: Vec<f64>,
    /// Sampler step index in `[0, step_count)`.
    pub diffusion_step: usize,
}

impl Conditioning {
    pub fn validate(&self, cfg: &ModelConfig, step_count: usize) -> CoreResult<()> {
        if self.observation.len() != cfg.obs_dim {
            return Err(CoreError::Shape {
                op: "conditioning",
                left: vec![self.observation.len()],
                right: vec![cfg.obs_dim],
            });
        }
        if self.task.len() != cfg.task_dim {
            return Err(CoreError::Shape {
                op: "conditioning",
                left: vec![self.task.len()],
                right: vec![cfg.task_dim],
            });
        }
        let ones = self.task.iter().filter(|&&v| v == 1.0).count();
        let zeros = self.task.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != self.task.len() {
            return Err(CoreError::Contract(format!(
                "task vector must be one-hot, got {:?}",
                self.task
            )));
        }
        if self.diffusion_step >= step_count {
            return Err(CoreError::Contract(format!(
                "diffusion_step {} out of range 0..{step_count}",
                self.diffusion_step
            )));
        }
        Ok(())
    }
}

/// Sinusoidal position embedding of an (integer-valued) step index.
pub fn sinusoidal_embedding(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = libm::pow(10_000.0, -(2.0 * i as f64) / dim as f64);
        out.push(libm::sin(pos * freq));
        out.push(libm::cos(pos * freq));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`, kept as a row so the bias add is a ones-column matmul.
    pub bias: Tensor,
}

impl LinearParams {
    fn uniform(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt(in_dim as f64);
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        LinearParams {
            weight: Tensor::new(vec![in_dim, out_dim], data).expect("init weight"),
            bias: Tensor::zeros(vec![1, out_dim]),
        }
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(vec![in_dim, out_dim]),
            bias: Tensor::zeros(vec![1, out_dim]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Two-layer perceptron parameters; tanh after the first layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub l1: LinearParams,
    pub l2: LinearParams,
}

impl MlpParams {
    pub fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.l1.weight, &self.l1.bias, &self.l2.weight, &self.l2.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.l1.weight,
            &mut self.l1.bias,
            &mut self.l2.weight,
            &mut self.l2.bias,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Success,
    Failure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DagParams {
    pub trunk: MlpParams,
    pub success_head: MlpParams,
    pub failure_head: MlpParams,
}

impl DagParams {
    pub fn head(&self, head: Head) -> &MlpParams {
        match head {
            Head::Success => &self.success_head,
            Head::Failure => &self.failure_head,
        }
    }

    pub fn head_mut(&mut self, head: Head) -> &mut MlpParams {
        match head {
            Head::Success => &mut self.success_head,
            Head::Failure => &mut self.failure_head,
        }
    }
}

/// The dual-generator model plus everything a checkpoint needs to rebuild
/// its sampling end to end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DagModel {
    pub config: ModelConfig,
    pub gen: GenConfig,
    pub stats: DataStats,
    pub params: DagParams,
}

impl DagModel {
    /// Seeded initialization. Hidden layers uniform in `±1/sqrt(fan_in)`,
    /// head output layers zero.
    pub fn init(config: ModelConfig, gen: GenConfig, stats: DataStats) -> CoreResult<Self> {
        config.validate()?;
        if stats.obs_mean.len() != config.obs_dim || stats.action_min.len() != config.action_dim {
            return Err(CoreError::Config(format!(
                "stats dims (obs {}, action {}) do not match model (obs {}, action {})",
                stats.obs_mean.len(),
                stats.action_min.len(),
                config.obs_dim,
                config.action_dim
            )));
        }
        let mut rng = Rng::seed_from_u64(config.init_seed);
        let trunk = MlpParams {
            l1: LinearParams::uniform(config.trunk_in_dim(), config.hidden_dim, &mut rng),
            l2: LinearParams::uniform(config.hidden_dim, config.hidden_dim, &mut rng),
        };
        let mk_head = |rng: &mut Rng| MlpParams {
            l1: LinearParams::uniform(config.head_in_dim(), config.hidden_dim, rng),
            l2: LinearParams::zeros(config.hidden_dim, config.chunk_dim()),
        };
        let success_head = mk_head(&mut rng);
        let failure_head = mk_head(&mut rng);
        Ok(DagModel {
            config,
            gen,
            stats,
            params: DagParams {
                trunk,
                success_head,
                failure_head,
            },
        })
    }

    pub fn chunk_dim(&self) -> usize {
        self.config.chunk_dim()
    }

    /// Trunk feature vector for a conditioning point.
    pub fn encode(&self, cond: &Conditioning) -> CoreResult<Tensor> {
        cond.validate(&self.config, self.gen.step_count())?;
        let mut tape = Tape::new();
        let vars = register_head_vars(&mut tape, &self.params, Head::Success, false, false);
        let obs = tape.constant(Tensor::new(
            vec![1, self.config.obs_dim],
            cond.observation.clone(),
        )?);
        let task = tape.constant(Tensor::new(vec![1, self.config.task_dim], cond.task.clone())?);
        let h = encode_batch(
            &mut tape,
            &self.config,
            &vars.trunk,
            obs,
            task,
            &[cond.diffusion_step],
        )?;
        let row = tape.value(h);
        Tensor::from_vec(row.data().to_vec())
    }

    /// Run one head on a precomputed trunk feature.
    pub fn head_forward(&self, head: Head, h: &Tensor, noisy_action: &Tensor) -> CoreResult<Tensor> {
        if h.len() != self.config.hidden_dim {
            return Err(CoreError::Shape {
                op: "head_forward",
                left: h.shape().to_vec(),
                right: vec![self.config.hidden_dim],
            });
        }
        if noisy_action.len() != self.chunk_dim() {
            return Err(CoreError::Shape {
                op: "head_forward",
                left: noisy_action.shape().to_vec(),
                right: vec![self.chunk_dim()],
            });
        }
        let mut tape = Tape::new();
        let vars = register_mlp(&mut tape, self.params.head(head), false);
        let hv = tape.constant(Tensor::new(
            vec![1, self.config.hidden_dim],
            h.data().to_vec(),
        )?);
        let av = tape.constant(Tensor::new(
            vec![1, self.chunk_dim()],
            noisy_action.data().to_vec(),
        )?);
        let ones = tape.constant(Tensor::new(vec![1, 1], vec![1.0])?);
        let x = tape.concat(&[hv, av])?;
        let out = mlp_forward(&mut tape, &vars, x, ones, false)?;
        let row = tape.value(out);
        Tensor::from_vec(row.data().to_vec())
    }

    pub fn predict_success(&self, noisy_action: &Tensor, cond: &Conditioning) -> CoreResult<Tensor> {
        let h = self.encode(cond)?;
        self.head_forward(Head::Success, &h, noisy_action)
    }

    pub fn predict_failure(&self, noisy_action: &Tensor, cond: &Conditioning) -> CoreResult<Tensor> {
        let h = self.encode(cond)?;
        self.head_forward(Head::Failure, &h, noisy_action)
    }

    /// Re-validate invariants, e.g. after deserializing a checkpoint.
    pub fn validate(&self) -> CoreResult<()> {
        self.config.validate()?;
        for t in self
            .params
            .trunk
            .tensors()
            .into_iter()
            .chain(self.params.success_head.tensors())
            .chain(self.params.failure_head.tensors())
        {
            t.validate()?;
        }
        let head_shapes_match = self
            .params
            .success_head
            .tensors()
            .iter()
            .zip(self.params.failure_head.tensors().iter())
            .all(|(a, b)| a.shape() == b.shape());
        if !head_shapes_match {
            return Err(CoreError::Config(
                "success and failure heads must be architecturally identical".into(),
            ));
        }
        Ok(())
    }
}

/// Tape handles for one MLP.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles for a trunk + one head forward pass, in optimizer order
/// (trunk tensors then head tensors).
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub trunk: MlpVars,
    pub head: MlpVars,
}

impl HeadVars {
    pub fn in_order(&self) -> [Var; 8] {
        [
            self.trunk.w1,
            self.trunk.b1,
            self.trunk.w2,
            self.trunk.b2,
            self.head.w1,
            self.head.b1,
            self.head.w2,
            self.head.b2,
        ]
    }
}

/// Put one MLP's parameters on a tape, as leaves when `trainable`.
pub fn register_mlp(tape: &mut Tape, mlp: &MlpParams, trainable: bool) -> MlpVars {
    let mut reg = |t: &Tensor| {
        if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    MlpVars {
        w1: reg(&mlp.l1.weight),
        b1: reg(&mlp.l1.bias),
        w2: reg(&mlp.l2.weight),
        b2: reg(&mlp.l2.bias),
    }
}

/// Register trunk + selected head. Ordering matches [`HeadVars::in_order`].
pub fn register_head_vars(
    tape: &mut Tape,
    params: &DagParams,
    head: Head,
    train_trunk: bool,
    train_head: bool,
) -> HeadVars {
    let trunk = register_mlp(tape, &params.trunk, train_trunk);
    let head = register_mlp(tape, params.head(head), train_head);
    HeadVars { trunk, head }
}

/// `tanh(x @ w1 + b1) @ w2 + b2`, with optional tanh on the output. The bias
/// rows are broadcast over the batch through a ones-column matmul.
pub fn mlp_forward(
    tape: &mut Tape,
    vars: &MlpVars,
    x: Var,
    ones: Var,
    final_tanh: bool,
) -> CoreResult<Var> {
    let xw = tape.matmul(x, vars.w1)?;
    let b1 = tape.matmul(ones, vars.b1)?;
    let pre = tape.add(xw, b1)?;
    let hidden = tape.tanh(pre)?;
    let hw = tape.matmul(hidden, vars.w2)?;
    let b2 = tape.matmul(ones, vars.b2)?;
    let out = tape.add(hw, b2)?;
    if final_tanh {
        tape.tanh(out)
    } else {
        Ok(out)
    }
}

/// Batched trunk: `tanh` MLP over `[obs | task | sinusoidal(step)]` rows.
pub fn encode_batch(
    tape: &mut Tape,
    cfg: &ModelConfig,
    trunk: &MlpVars,
    obs: Var,
    task: Var,
    steps: &[usize],
) -> CoreResult<Var> {
    let b = steps.len();
    let mut emb = Vec::with_capacity(b * cfg.step_embed_dim);
    for &s in steps {
        emb.extend(sinusoidal_embedding(s as f64, cfg.step_embed_dim));
    }
    let emb = tape.constant(Tensor::new(vec![b, cfg.step_embed_dim], emb)?);
    let x = tape.concat(&[obs, task, emb])?;
    let ones = tape.constant(Tensor::new(vec![b, 1], vec![1.0; b])?);
    mlp_forward(tape, trunk, x, ones, true)
}

/// Batched full forward of one generator head.
pub fn forward_batch(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &HeadVars,
    obs: Var,
    task: Var,
    steps: &[usize],
    noisy: Var,
) -> CoreResult<Var> {
    let b = steps.len();
    let h = encode_batch(tape, cfg, &vars.trunk, obs, task, steps)?;
    let x = tape.concat(&[h, noisy])?;
    let ones = tape.constant(Tensor::new(vec![b, 1], vec![1.0; b])?);
    mlp_forward(tape, &vars.head, x, ones, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataStats;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            obs_dim: 4,
            task_dim: 2,
            action_dim: 2,
            horizon: 3,
            hidden_dim: 16,
            step_embed_dim: 8,
            init_seed: seed,
        }
    }

    fn small_model(seed: u64) -> DagModel {
        let cfg = small_config(seed);
        let stats = DataStats::identity(cfg.obs_dim, cfg.action_dim);
        DagModel::init(cfg, GenConfig::diffusion(10), stats).unwrap()
    }

    fn cond(step: usize) -> Conditioning {
        Conditioning {
            observation: vec![0.1, -0.2, 0.3, 0.0],
            task: vec![1.0, 0.0],
            diffusion_step: step,
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let m = small_model(3);
        let h1 = m.encode(&cond(2)).unwrap();
        let h2 = m.encode(&cond(2)).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn task_and_step_change_the_feature() {
        // sampled check over 100 random inits
        let mut task_differs = 0;
        let mut step_differs = 0;
        for seed in 0..100u64 {
            let m = small_model(seed);
            let base = m.encode(&cond(0)).unwrap();
            let other_task = Conditioning {
                task: vec![0.0, 1.0],
                ..cond(0)
            };
            if m.encode(&other_task).unwrap() != base {
                task_differs += 1;
            }
            if m.encode(&cond(9)).unwrap() != base {
                step_differs += 1;
            }
        }
        assert_eq!(task_differs, 100);
        assert_eq!(step_differs, 100);
    }

    #[test]
    fn zero_initialized_heads_predict_zero_and_agree() {
        let m = small_model(11);
        let noisy = Tensor::from_vec(vec![0.5; 6]).unwrap();
        let s = m.predict_success(&noisy, &cond(1)).unwrap();
        let f = m.predict_failure(&noisy, &cond(1)).unwrap();
        assert_eq!(s.data(), &[0.0; 6]);
        assert_eq!(s, f);
        assert_eq!(s.len(), m.chunk_dim());
    }

    #[test]
    fn prediction_shape_contract() {
        let m = small_model(1);
        let bad = Tensor::from_vec(vec![0.0; 5]).unwrap();
        assert!(matches!(
            m.predict_success(&bad, &cond(0)),
            Err(CoreError::Shape { .. })
        ));
    }

    #[test]
    fn heads_have_identical_parameter_counts() {
        let m = small_model(2);
        assert_eq!(
            m.params.success_head.param_count(),
            m.params.failure_head.param_count()
        );
    }

    #[test]
    fn one_hot_task_is_enforced() {
        let m = small_model(4);
        let mut c = cond(0);
        c.task = vec![0.5, 0.5];
        let noisy = Tensor::zeros(vec![6]);
        assert!(matches!(
            m.predict_success(&noisy, &c),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn step_out_of_range_is_rejected() {
        let m = small_model(4);
        let noisy = Tensor::zeros(vec![6]);
        assert!(m.predict_success(&noisy, &cond(10)).is_err());
    }

    #[test]
    fn sinusoidal_embedding_layout() {
        let e = sinusoidal_embedding(0.0, 8);
        assert_eq!(e.len(), 8);
        // at pos 0: sin = 0, cos = 1 for every frequency
        for pair in e.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }
}
