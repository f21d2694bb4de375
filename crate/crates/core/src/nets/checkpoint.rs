//! Versioned JSON container for model parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "buctd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// `bu` or a top-down arch name.
    pub arch: String,
    pub insert_stage: usize,
    pub num_keypoints: usize,
    pub cond_channels: usize,
    /// Snapshot of the run configuration that produced the parameters.
    pub config: serde_json::Value,
    /// Training step at which the parameters were saved.
    pub step: usize,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_store(
        arch: &str,
        insert_stage: usize,
        num_keypoints: usize,
        cond_channels: usize,
        config: serde_json::Value,
        step: usize,
        store: &ParamStore<f32>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch: arch.into(),
            insert_stage,
            num_keypoints,
            cond_channels,
            config,
            step,
            params: store
                .iter()
                .map(|(_, name, t)| ParamRecord {
                    name: name.into(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: format!("line {}, column {}: {e}", e.line(), e.column()),
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                path: path.display().to_string(),
                msg: format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            });
        }
        Ok(ck)
    }

    pub fn expect_keypoints(&self, k: usize) -> Result<()> {
        if self.num_keypoints != k {
            return Err(Error::Schema {
                expected: k,
                found: self.num_keypoints,
                context: format!("checkpoint for arch {}", self.arch),
            });
        }
        Ok(())
    }

    /// Copies every stored parameter into `store`, matching by name and shape.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameter tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for rec in &self.params {
            let id = store
                .find(&rec.name)
                .ok_or_else(|| Error::Config(format!("checkpoint parameter `{}` not in model", rec.name)))?;
            if store.get(id).shape() != rec.shape.as_slice() || rec.data.len() != store.get(id).len() {
                return Err(Error::shape(store.get(id).shape(), &rec.shape, "checkpoint parameter"));
            }
            *store.get_mut(id) = Tensor::from_vec(&rec.shape, rec.data.clone());
        }
        Ok(())
    }
}
