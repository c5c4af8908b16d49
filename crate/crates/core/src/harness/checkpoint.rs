//! Checkpoint: `checkpoint.json` manifest plus `checkpoint.bin`, a flat
//! little-endian f32 blob holding every parameter in manifest order followed
//! by the correlation-bank reference, if any.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{CorrMatrix, CorrelationBank};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::train::TrainOutcome;

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "checkpoint.bin";
const FORMAT: &str = "partalign-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BankEntry {
    n: usize,
    ema_rate: f64,
    updates_seen: u64,
    /// Float offset of the `n * n` reference, absent before the first update.
    offset: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: RunConfig,
    params: Vec<ParamEntry>,
    bank: Option<BankEntry>,
    total_floats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub bank: Option<CorrelationBank>,
}

impl Checkpoint {
    pub fn from_outcome(config: &RunConfig, outcome: &TrainOutcome) -> Self {
        Checkpoint {
            config: config.clone(),
            params: outcome.model.params.clone(),
            bank: outcome.bank.clone(),
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.config.model_config(), self.params.clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob: Vec<f32> = Vec::new();
        let mut params = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            params.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            blob.extend_from_slice(t.data());
        }
        let bank = self.bank.as_ref().map(|b| {
            let offset = b.reference().map(|c| {
                let at = blob.len();
                blob.extend(c.data().iter().map(|&v| v as f32));
                at
            });
            BankEntry {
                n: b.n,
                ema_rate: b.ema_rate,
                updates_seen: b.updates_seen,
                offset,
            }
        });
        let manifest = Manifest {
            format: FORMAT.to_string(),
            config: self.config.clone(),
            params,
            bank,
            total_floats: blob.len(),
        };
        let json_path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
        let bin_path = dir.join(BLOB_FILE);
        let bytes: Vec<u8> = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let json_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format '{}', expected '{FORMAT}'",
                manifest.format
            )));
        }
        let bin_path = dir.join(BLOB_FILE);
        let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if bytes.len() != manifest.total_floats * 4 {
            return Err(Error::Checkpoint(format!(
                "blob holds {} bytes, manifest expects {}",
                bytes.len(),
                manifest.total_floats * 4
            )));
        }
        let blob: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let slice = |offset: usize, len: usize| -> Result<&[f32]> {
            blob.get(offset..offset + len)
                .ok_or_else(|| Error::Checkpoint(format!("range {offset}+{len} outside blob")))
        };

        let mut params = ParamStore::new();
        for p in &manifest.params {
            let len = p.shape.iter().product();
            let t = Tensor::new(p.shape.clone(), slice(p.offset, len)?.to_vec())?;
            params.add(p.name.clone(), t);
        }
        let bank = match &manifest.bank {
            None => None,
            Some(b) => {
                let mut bank = CorrelationBank::new(b.n, b.ema_rate)?;
                let c_ref = match b.offset {
                    Some(off) => {
                        let data = slice(off, b.n * b.n)?.iter().map(|&v| v as f64).collect();
                        Some(CorrMatrix::new(b.n, data)?)
                    }
                    None => None,
                };
                bank.restore(c_ref, b.updates_seen)?;
                Some(bank)
            }
        };
        let ckpt = Checkpoint {
            config: manifest.config,
            params,
            bank,
        };
        ckpt.model()?;
        Ok(ckpt)
    }
}
