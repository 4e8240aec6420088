//! Trained head checkpoints.
//!
//! ```text
//! <dir>/checkpoint.json           config, history, tensor index
//! <dir>/tensors/<name>.swut       f32 parameter tensors
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor_file::{read_tensor, write_tensor, TensorData};
use super::{read_json, write_json};
use crate::error::{Error, Result};
use crate::head::HeadParams;
use crate::trainer::{TrainConfig, TrainHistory};

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub learnable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub history: TrainHistory,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub history: TrainHistory,
    pub params: HeadParams,
}

pub fn save_checkpoint(dir: &Path, params: &HeadParams, config: &TrainConfig, history: &TrainHistory) -> Result<()> {
    let tdir = dir.join("tensors");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut entries = Vec::new();
    for p in params.tensors(&config.head) {
        let shape = if p.shape.is_empty() { vec![1] } else { p.shape.clone() };
        let data = p.values.iter().map(|&v| v as f32).collect();
        write_tensor(&tdir.join(format!("{}.swut", p.name)), &TensorData::F32 { shape: shape.clone(), data })?;
        entries.push(TensorEntry {
            name: p.name,
            shape,
            learnable: p.learnable,
        });
    }
    let index = CheckpointIndex {
        schema_version: CHECKPOINT_SCHEMA,
        config: config.clone(),
        history: history.clone(),
        tensors: entries,
    };
    write_json(&dir.join("checkpoint.json"), &index)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("checkpoint.json");
    let index: CheckpointIndex = read_json(&path)?;
    if index.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::format(&path, format!("unsupported schema version {}", index.schema_version)));
    }
    let cfg = index.config.head.clone();
    // Every tensor is overwritten below, so the init draw only fixes the layout.
    let mut params = HeadParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::format(&path, e.to_string()))?;
    let mut slots = params.tensors_mut(&cfg);
    if slots.len() != index.tensors.len() {
        return Err(Error::format(&path, "tensor index does not match the head layout"));
    }
    for (slot, entry) in slots.iter_mut().zip(&index.tensors) {
        if slot.name != entry.name {
            return Err(Error::format(&path, format!("expected tensor {}, found {}", slot.name, entry.name)));
        }
        let tpath = dir.join("tensors").join(format!("{}.swut", entry.name));
        let data = match read_tensor(&tpath)? {
            TensorData::F32 { data, .. } => data,
            TensorData::I32 { .. } => return Err(Error::format(&tpath, "expected float32 data")),
        };
        if data.len() != slot.values.len() {
            return Err(Error::format(&tpath, format!("expected {} values, found {}", slot.values.len(), data.len())));
        }
        for (dst, &src) in slot.values.iter_mut().zip(&data) {
            *dst = f64::from(src);
        }
    }
    drop(slots);
    params.check(&cfg).map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(Checkpoint {
        config: index.config,
        history: index.history,
        params,
    })
}
