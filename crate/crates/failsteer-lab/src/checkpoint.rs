//! Model checkpoints: one JSON document holding the full config header
//! (dims, generative mode and schedule, normalization statistics) and every
//! parameter array. f64 values round-trip bit-exactly through the shortest
//! decimal representation.

use std::path::Path;

use failsteer_core::model::DagModel;

use crate::error::{LabError, LabResult};

pub fn save_model(path: &Path, model: &DagModel) -> LabResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    }
    let bytes = serde_json::to_vec(model)?;
    std::fs::write(path, bytes).map_err(LabError::io(path))?;
    Ok(())
}

pub fn load_model(path: &Path) -> LabResult<DagModel> {
    let bytes = std::fs::read(path).map_err(LabError::io(path))?;
    let model: DagModel = serde_json::from_slice(&bytes)?;
    model.validate()?;
    Ok(model)
}
