//! Algorithmic core for failure-informed action-policy experiments.
//!
//! Everything in this crate is deterministic, IO-free and `no_std`-compatible
//! (an allocator is required). The layers, bottom-up:
//!
//! - [`tensor`] / [`autodiff`] / [`optim`] — a minimal f64 tensor type, a
//!   Wengert-tape reverse-mode differentiator and a bias-corrected Adam.
//! - [`model`] — the dual-generator network: a shared trunk encoding
//!   (observation, task, step) plus twin success/failure heads.
//! - [`generative`] — DDPM noise schedules, flow-matching targets, the
//!   training losses and the two samplers (ancestral / Euler).
//! - [`guidance`] — score combiners (CFG, negative prompting, static and
//!   adaptive failure-informed) and the per-step guided score callback.
//! - [`env`] — deterministic planar manipulation surrogates with trap
//!   regions, a scripted waypoint expert and replanning-based correction.
//! - [`data`] — trajectory records, success/failure dataset assembly,
//!   normalization statistics and chunking.
//! - [`train`] / [`eval`] — the stage trainers and the rollout evaluator.
//!
//! File formats, configuration and the CLI live in the companion
//! `failsteer-lab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod generative;
pub mod guidance;
pub mod model;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CoreError, CoreResult};
pub use tensor::Tensor;
