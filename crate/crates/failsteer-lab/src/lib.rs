//! IO, configuration and orchestration around `failsteer-core`: dataset and
//! checkpoint files, the staged training pipeline, CSV reporting, and the
//! `failsteer` CLI.

pub mod checkpoint;
pub mod config;
pub mod csvio;
pub mod dataset_io;
pub mod error;
pub mod pipeline;

pub use error::{LabError, LabResult};
