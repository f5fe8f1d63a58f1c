//! Parameter checkpoints: one RST1 file per tensor plus a `params.json` index
//! carrying the model-config hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::data::rst1;
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "params.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub config_hash: String,
    pub params: BTreeMap<String, ParamEntry>,
}

pub fn save_checkpoint(dir: &Path, params: &ParamStore<f32>, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = BTreeMap::new();
    for (name, t) in params.iter() {
        let file = format!("{}.rst", name);
        rst1::write(&dir.join(&file), t.shape(), t.data())?;
        entries.insert(
            name.to_string(),
            ParamEntry {
                file,
                shape: t.shape().to_vec(),
            },
        );
    }
    let index = CheckpointIndex {
        config_hash: config_hash.to_string(),
        params: entries,
    };
    let path = dir.join(INDEX_FILE);
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
}

pub fn read_index(dir: &Path) -> Result<CheckpointIndex> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every parameter; when `expected_hash` is given a mismatch is an error.
pub fn load_checkpoint(dir: &Path, expected_hash: Option<&str>) -> Result<ParamStore<f32>> {
    let index = read_index(dir)?;
    if let Some(expected) = expected_hash {
        if index.config_hash != expected {
            return Err(Error::ConfigHashMismatch {
                expected: expected.to_string(),
                found: index.config_hash,
            });
        }
    }
    let mut store = ParamStore::new();
    for (name, entry) in &index.params {
        let path = dir.join(&entry.file);
        let (shape, values) = rst1::read(&path)?;
        if shape != entry.shape {
            return Err(Error::ShapeLength {
                path,
                detail: format!("index says {:?}, file has {:?}", entry.shape, shape),
            });
        }
        store.insert(name.clone(), Tensor::new(shape, values)?);
    }
    Ok(store)
}
