use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Parameter snapshot: name → `{shape, values}` plus metadata and the
/// configuration that built the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub metadata: CheckpointMetadata,
    #[serde(default)]
    pub config: serde_json::Value,
    pub params: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, seed: u64, config: serde_json::Value) -> Result<Self> {
        let params = store
            .iter()
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    TensorRecord {
                        shape: p.value.shape().to_vec(),
                        values: p.value.data().to_vec(),
                    },
                )
            })
            .collect();
        Ok(Self {
            metadata: CheckpointMetadata {
                format_version: CHECKPOINT_FORMAT_VERSION,
                seed,
                config_hash: content_hash(serde_json::to_string(&config)?.as_bytes()),
            },
            config,
            params,
        })
    }

    /// Overwrite every parameter of `store` from this checkpoint. Every
    /// parameter must be present with a matching shape.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.metadata.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                self.metadata.format_version
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.param(id).name.clone();
            let rec = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if rec.shape != store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    rec.shape,
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = Tensor::new(rec.shape.clone(), rec.values.clone())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let json = self.to_json()?;
        std::fs::write(path, &json).map_err(|e| Error::io(path, e))?;
        Ok(content_hash(json.as_bytes()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        let id = store
            .add("a", Tensor::row(vec![0.1, 1.0 / 3.0, -2.5e-300, std::f64::consts::PI]))
            .unwrap();
        let ck = Checkpoint::from_store(&store, 9, serde_json::json!({"k": 1})).unwrap();
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let mut other = store.clone();
        other.value_mut(id).data_mut()[0] = 0.0;
        back.apply_to(&mut other).unwrap();
        assert_eq!(other.value(id), store.value(id));
        assert_eq!(back.metadata.seed, 9);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::row(vec![1.0, 2.0])).unwrap();
        let ck = Checkpoint::from_store(&store, 0, serde_json::Value::Null).unwrap();
        let mut other = ParamStore::new();
        other.add("a", Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(ck.apply_to(&mut other).is_err());
    }
}
