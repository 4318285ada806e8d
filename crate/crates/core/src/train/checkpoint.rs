//! Single-file checkpoints.
//!
//! ```text
//! b"TSRGCKPT"            8-byte magic
//! u64 LE                 header length in bytes
//! header                 UTF-8 JSON (configs, dataset hash, parameter table)
//! payload                parameters in table order, row-major LE f64
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trainer::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TSRGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    /// `config_hash` of the prepared dataset the model was trained on.
    pub dataset_hash: Option<String>,
    pub epoch: usize,
    pub val_mae: Option<f64>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, train_config: Option<TrainConfig>, dataset_hash: Option<String>, epoch: usize, val_mae: Option<f64>) -> Self {
        let params = model
            .params
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model_config: model.config().clone(),
                train_config,
                dataset_hash,
                epoch,
                val_mae: val_mae.filter(|v| v.is_finite()),
                params,
            },
            model,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.model.params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, t) in self.model.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            path: origin.to_path_buf(),
            detail: detail.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", header.format_version)));
        }
        let mut offset = 16 + hlen;
        let mut store = ParamStore::new();
        for entry in &header.params {
            let count: usize = entry.shape.iter().product();
            let chunk = bytes.get(offset..offset + 8 * count).ok_or_else(|| bad("truncated payload"))?;
            let data = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            store.insert(entry.name.clone(), Tensor::new(&entry.shape, data)?)?;
            offset += 8 * count;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        let model = Model::from_params(&header.model_config, store)?;
        Ok(Self { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }

    /// Fails unless the checkpoint was trained on data with `hash`.
    pub fn require_dataset(&self, hash: &str) -> Result<()> {
        match &self.header.dataset_hash {
            Some(h) if h == hash => Ok(()),
            Some(h) => Err(Error::HashMismatch {
                expected: h.clone(),
                found: hash.to_string(),
            }),
            None => Err(Error::HashMismatch {
                expected: "<none>".into(),
                found: hash.to_string(),
            }),
        }
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.header.model_config
    }
}
