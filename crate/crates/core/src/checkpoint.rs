//! Versioned model checkpoints with training lineage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{JointModel, ModelConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;
use crate::training::{TrainConfig, TrainMode};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Where a checkpoint's weights came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub mode: Option<TrainMode>,
    /// Hash of the checkpoint this one was initialized from.
    pub parent_hash: Option<String>,
    /// Training phase that produced the weights (`pretrain`, `finetune`, `train`).
    pub phase: Option<String>,
    /// Epoch whose weights were kept.
    pub epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: Vec<StoredParam>,
    pub train_config: Option<TrainConfig>,
    pub lineage: Lineage,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &JointModel<T>, train_config: Option<&TrainConfig>, lineage: Lineage) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, p)| StoredParam {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: p.value.data().iter().map(|x| x.as_f64()).collect(),
            })
            .collect();
        Self {
            version: CHECKPOINT_FORMAT_VERSION,
            model: model.config.clone(),
            tokenizer: model.tokenizer.clone(),
            params,
            train_config: train_config.cloned(),
            lineage,
        }
    }

    /// Rebuilds the model, rejecting parameters whose names or shapes differ
    /// from what the stored configuration produces.
    pub fn to_model<T: Scalar>(&self) -> Result<JointModel<T>> {
        let reference = JointModel::<T>::new(self.model.clone(), self.tokenizer.clone(), 0)?;
        if reference.store.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "checkpoint holds {} parameters, configuration expects {}",
                self.params.len(),
                reference.store.len()
            )));
        }
        let mut store = ParamStore::new();
        for p in &self.params {
            let expected = reference
                .store
                .by_name(&p.name)
                .ok_or_else(|| Error::Integrity(format!("unexpected parameter {}", p.name)))?;
            if expected.shape() != (p.rows, p.cols) || p.data.len() != p.rows * p.cols {
                return Err(Error::Integrity(format!(
                    "parameter {} has shape {}x{}, configuration expects {:?}",
                    p.name,
                    p.rows,
                    p.cols,
                    expected.shape()
                )));
            }
            let data = p.data.iter().map(|&x| T::lit(x)).collect();
            store.insert(p.name.clone(), Tensor::from_vec(p.rows, p.cols, data));
        }
        JointModel::from_store(self.model.clone(), self.tokenizer.clone(), store)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("checkpoint serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_FORMAT_VERSION,
                found,
            });
        }
        let mut ck: Checkpoint = serde_json::from_value(value)?;
        ck.tokenizer.reindex();
        Ok(ck)
    }
}
