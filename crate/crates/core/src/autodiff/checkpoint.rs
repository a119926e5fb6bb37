//! Parameter checkpoints: a flat little-endian `f32` blob plus a JSON
//! sidecar (`<path>.json`) listing every tensor's name, shape and element
//! offset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Sidecar {
    pub version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>, metadata: serde_json::Value) -> Result<()> {
    let mut blob = Vec::with_capacity(store.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for p in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        offset += p.value.len();
    }
    let sidecar = Sidecar {
        version: CHECKPOINT_VERSION,
        dtype: "f32".into(),
        tensors,
        metadata,
    };
    fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore<f32>, serde_json::Value)> {
    let side = sidecar_path(path);
    let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&text)?;
    if sidecar.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            sidecar.version
        )));
    }
    if sidecar.dtype != "f32" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", sidecar.dtype)));
    }
    let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
    if blob.len() % 4 != 0 {
        return Err(Error::Checkpoint("blob length is not a multiple of 4".into()));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut store = ParamStore::new();
    for e in sidecar.tensors {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} exceeds blob", e.name)))?
            .to_vec();
        store.push(e.name, Tensor::new(e.shape, data)?)?;
    }
    Ok((store, sidecar.metadata))
}
