//! JSON parameter checkpoints.
//!
//! ```json
//! {"format": "gfscil-params/1",
//!  "tensors": [{"name": "w1", "shape": [16, 32], "data": [...]}, ...]}
//! ```
//!
//! Tensors appear in the order `w1, b1, w2, b2, w3, b3`. Values are written
//! with round-trip float formatting, so save then load is bit-exact.

use std::path::Path;

use gfscil_core::model::{ModelError, ParamSet, PARAM_NAMES};
use gfscil_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::fsutil::{atomic_write, read_file, FsError};

pub const FORMAT: &str = "gfscil-params/1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error("checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {0:?}")]
    Format(String),
    #[error("tensor {index}: expected name {expected:?}, found {found:?}")]
    Name { index: usize, expected: &'static str, found: String },
    #[error("tensor {0}: data length does not match shape")]
    Length(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    tensors: Vec<NamedTensor>,
}

pub fn to_json(params: &ParamSet) -> Result<String, CheckpointError> {
    let tensors = params
        .named()
        .map(|(name, t)| NamedTensor { name: name.into(), shape: t.shape().to_vec(), data: t.data().to_vec() })
        .collect();
    Ok(serde_json::to_string(&Checkpoint { format: FORMAT.into(), tensors })?)
}

pub fn from_json(text: &str) -> Result<ParamSet, CheckpointError> {
    let ck: Checkpoint = serde_json::from_str(text)?;
    if ck.format != FORMAT {
        return Err(CheckpointError::Format(ck.format));
    }
    let mut tensors = Vec::with_capacity(ck.tensors.len());
    for (index, t) in ck.tensors.into_iter().enumerate() {
        if let Some(&expected) = PARAM_NAMES.get(index) {
            if t.name != expected {
                return Err(CheckpointError::Name { index, expected, found: t.name });
            }
        }
        tensors.push(Tensor::new(t.shape, t.data).ok_or(CheckpointError::Length(t.name))?);
    }
    Ok(ParamSet::from_tensors(tensors)?)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<(), CheckpointError> {
    atomic_write(path, to_json(params)?.as_bytes())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet, CheckpointError> {
    from_json(&read_file(path)?)
}
