//! Run configuration: one TOML file drives training, evaluation and
//! ablations. Everything except the output root (env `FAILSTEER_OUT`)
//! lives here.

use std::path::{Path, PathBuf};

use failsteer_core::data::FailureChunking;
use failsteer_core::env::{EnvParams, TaskId, TaskSpec};
use failsteer_core::generative::{GenConfig, GenMode};
use failsteer_core::model::ModelConfig;
use failsteer_core::rng::derive_seed;
use failsteer_core::train::OptConfig;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

pub const OUT_ROOT_ENV: &str = "FAILSTEER_OUT";

/// Output root: `$FAILSTEER_OUT`, defaulting to `./failsteer_out`.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("failsteer_out"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
    pub mode: GenMode,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            name: "run".into(),
            seed: 1,
            mode: GenMode::Diffusion,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub step_embed_dim: usize,
    pub horizon: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_dim: 64,
            step_embed_dim: 32,
            horizon: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub n_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub n_euler_steps: usize,
}

impl Default for GenSection {
    fn default() -> Self {
        // sum(beta) ~ 5.75 so alpha_bar at the last step is ~3e-3 and the
        // forward process actually reaches the sampling prior
        GenSection {
            n_steps: 25,
            beta_min: 0.01,
            beta_max: 0.45,
            n_euler_steps: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub list: Vec<String>,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            list: vec!["pick_place".into()],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Expert demonstration grid.
    pub demo_configs: u64,
    pub demo_runs: u64,
    /// Stage-2 policy-rollout grid for failure harvesting.
    pub rollout_configs: u64,
    pub rollout_runs: u64,
    /// Bootstrap noise for the fallback failure generator.
    pub noisy_sigma: f64,
    /// Top up with the noisy expert until this many failures exist.
    pub min_failures: usize,
    pub max_failures: usize,
    pub max_corrected: usize,
    pub failure_chunking: FailureChunking,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            demo_configs: 60,
            demo_runs: 1,
            rollout_configs: 50,
            rollout_runs: 3,
            noisy_sigma: 0.04,
            min_failures: 40,
            max_failures: 400,
            max_corrected: 400,
            failure_chunking: FailureChunking::Full,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fine-tune rates; default to `lr`.
    pub stage2_lr: Option<f64>,
    pub stage3_lr: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            stage1_steps: 1500,
            stage2_steps: 800,
            stage3_steps: 1200,
            batch_size: 64,
            lr: 1e-3,
            stage2_lr: None,
            stage3_lr: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub configs: u64,
    pub runs: u64,
    /// Evaluation config ids start here, disjoint from the training grid.
    pub config_offset: u64,
    /// Training seeds; each gets its own pipeline and evaluation.
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            configs: 50,
            runs: 3,
            config_offset: 10_000,
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub static_lambda: f64,
    pub alpha: f64,
    pub cos_floor: f64,
    pub alpha_sweep: Vec<f64>,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            static_lambda: 0.1,
            alpha: 1.0,
            cos_floor: 1e-8,
            alpha_sweep: vec![0.5, 1.0, 2.0, 5.0],
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub generative: GenSection,
    pub env: EnvParams,
    pub tasks: TaskSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub guidance: GuidanceSection,
}

pub fn parse_task(name: &str) -> LabResult<TaskId> {
    TaskId::ALL
        .into_iter()
        .find(|t| t.name() == name)
        .ok_or_else(|| {
            LabError::Config(format!(
                "unknown task {name:?}; expected one of {:?}",
                TaskId::ALL.map(|t| t.name())
            ))
        })
}

impl RunConfig {
    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(LabError::io(path))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> LabResult<()> {
        if self.run.name.is_empty()
            || self
                .run
                .name
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
        {
            return Err(LabError::Config(format!(
                "run.name must be a nonempty [A-Za-z0-9_-] token, got {:?}",
                self.run.name
            )));
        }
        if self.tasks.list.is_empty() {
            return Err(LabError::Config("tasks.list is empty".into()));
        }
        self.task_ids()?;
        if self.eval.seeds.is_empty() {
            return Err(LabError::Config("eval.seeds is empty".into()));
        }
        if !(self.guidance.static_lambda >= 0.0 && self.guidance.alpha >= 0.0) {
            return Err(LabError::Config("guidance scales must be >= 0".into()));
        }
        self.gen_config()
            .schedule()
            .map_err(|e| LabError::Config(e.to_string()))?;
        self.gen_config()
            .flow_config()
            .map_err(|e| LabError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn task_ids(&self) -> LabResult<Vec<TaskId>> {
        self.tasks.list.iter().map(|s| parse_task(s)).collect()
    }

    pub fn task_spec(&self, task: TaskId) -> TaskSpec {
        TaskSpec::new(task, self.env.clone())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            mode: self.run.mode,
            n_steps: self.generative.n_steps,
            beta_min: self.generative.beta_min,
            beta_max: self.generative.beta_max,
            n_euler_steps: self.generative.n_euler_steps,
        }
    }

    pub fn model_config(&self, task: TaskId, seed: u64) -> ModelConfig {
        let spec = self.task_spec(task);
        ModelConfig {
            obs_dim: spec.obs_dim(),
            task_dim: TaskId::ALL.len(),
            action_dim: task.action_dim(),
            horizon: self.model.horizon,
            hidden_dim: self.model.hidden_dim,
            step_embed_dim: self.model.step_embed_dim,
            init_seed: derive_seed(self.run.seed, &[task.index() as u64, seed]),
        }
    }

    pub fn opt_config(&self, steps: usize, seed: u64, stage: u64) -> OptConfig {
        OptConfig {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            steps,
            seed: derive_seed(self.run.seed, &[stage, seed]),
            freeze_trunk: false,
        }
    }

    /// Directory all artifacts of this run live under.
    pub fn run_dir(&self) -> PathBuf {
        out_root().join(&self.run.name)
    }
}
