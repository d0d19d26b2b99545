//! Checkpoints are a directory holding `model.json` (configuration, class
//! names, parameter layout) and `params.bin`: the magic `DIRP`, a
//! little-endian `u32` tensor count, then per tensor a `u32` element count
//! followed by that many little-endian `f32` values, in layout order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{ParamSet, Tensor};

use super::fusion::FusionRegistry;
use super::network::{Dianet, ModelConfig};

pub const PARAMS_MAGIC: &[u8; 4] = b"DIRP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        format: "DIRP",
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes `model.json` and `params.bin` under `dir`, creating it.
pub fn save_checkpoint(dir: &Path, model: &Dianet<f32>, class_names: &[String], seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Checkpoint {
        model: model.config().clone(),
        class_names: class_names.to_vec(),
        seed,
        params: model
            .params()
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json_path = dir.join("model.json");
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for t in model.params().tensors() {
        buf.extend_from_slice(&(t.numel() as u32).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = dir.join("params.bin");
    fs::write(&bin, buf).map_err(|e| Error::io(&bin, e))?;
    Ok(dir.to_path_buf())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Checkpoint, Dianet<f32>)> {
    let json_path = dir.join("model.json");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta: Checkpoint = serde_json::from_str(&text)?;

    let bin = dir.join("params.bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() < 8 || &bytes[..4] != PARAMS_MAGIC {
        return Err(bad(&bin, "missing DIRP header"));
    }
    if bytes.len() % 4 != 0 {
        return Err(bad(&bin, "length is not a multiple of 4"));
    }
    let mut words = bytes[4..].chunks(4);
    let mut next = || -> Result<[u8; 4]> {
        words
            .next()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad(&bin, "truncated"))
    };
    let count = u32::from_le_bytes(next()?) as usize;
    if count != meta.params.len() {
        return Err(bad(
            &bin,
            format!("{count} tensors but model.json lists {}", meta.params.len()),
        ));
    }
    let mut params = ParamSet::new();
    for entry in &meta.params {
        let n = u32::from_le_bytes(next()?) as usize;
        if n != entry.shape.iter().product::<usize>() {
            return Err(bad(
                &bin,
                format!("{}: {n} values for shape {:?}", entry.name, entry.shape),
            ));
        }
        let data = (0..n)
            .map(|_| next().map(f32::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    if next().is_ok() {
        return Err(bad(&bin, "trailing bytes"));
    }
    let model = Dianet::from_params(meta.model.clone(), params, &FusionRegistry::builtin())?;
    Ok((meta, model))
}
