//! Checkpoint directories: one `CTT1` file per parameter block plus an
//! `index.json` recording layer order, shapes, seed and epoch.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelParams, ParamBlock};
use crate::ctt::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub layers: Vec<CheckpointEntry>,
    pub seed: u64,
    pub epoch: usize,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, params: &ModelParams, seed: u64, epoch: usize) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::with_capacity(params.blocks.len());
    for (i, b) in params.blocks.iter().enumerate() {
        let file = format!("{i:02}_{}.ctt", b.name);
        Tensor::f32(b.shape.clone(), b.values.clone())?.write(dir.join(&file))?;
        layers.push(CheckpointEntry { name: b.name.clone(), shape: b.shape.clone(), file });
    }
    let index = CheckpointIndex { layers, seed, epoch };
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelParams, CheckpointIndex)> {
    let dir = dir.as_ref();
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text)?;
    let mut blocks = Vec::with_capacity(index.layers.len());
    for entry in &index.layers {
        let t = Tensor::read(dir.join(&entry.file))?;
        if t.dims != entry.shape {
            return Err(Error::Format(format!(
                "{}: stored dims {:?} differ from index {:?}",
                entry.file, t.dims, entry.shape
            )));
        }
        blocks.push(ParamBlock { name: entry.name.clone(), shape: t.dims.clone(), values: t.into_f32()? });
    }
    let params = ModelParams { blocks };
    params.validate()?;
    Ok((params, index))
}
