//! Single-file checkpoint container.
//!
//! ```text
//! b"GATETSCK" | u64 LE header length | JSON header | f64 LE payload
//! ```
//!
//! The header holds both configs, the training state and a manifest of
//! every tensor (name, shape, byte offset into the payload, SHA-256 of its
//! bytes). Optimizer moments are stored as `adam.m.<param>` and
//! `adam.v.<param>` after the parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::TrainState;
use crate::error::{Error, Result};
use crate::moe::GateTsConfig;
use crate::nncore::{OptimizerState, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"GATETSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: GateTsConfig,
    train: TrainConfig,
    state: TrainState,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or to serve forecasts.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: GateTsConfig,
    pub train_config: TrainConfig,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub state: TrainState,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let moments = |prefix: &str, data: &[Vec<f64>]| {
            self.params
                .iter()
                .zip(data)
                .map(|((name, t), m)| (format!("{prefix}.{name}"), t.shape().to_vec(), m.clone()))
                .collect::<Vec<_>>()
        };
        let mut all: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().to_vec()))
            .collect();
        if self.optimizer.first_moment.len() != self.params.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        all.extend(moments("adam.m", &self.optimizer.first_moment));
        all.extend(moments("adam.v", &self.optimizer.second_moment));
        for (name, shape, data) in all {
            let start = payload.len();
            for v in &data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape,
                offset: start as u64,
                sha256: digest(&payload[start..]),
            });
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            state: self.state.clone(),
            optimizer_step: self.optimizer.step,
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let version: serde_json::Value =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        match version.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint version {v} (this build reads version {FORMAT_VERSION})"
                )))
            }
            None => return Err(bad("header has no format_version")),
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let payload = &body[hlen..];
        let read = |e: &TensorEntry| -> Result<Tensor> {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let chunk = payload
                .get(start..start + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("payload for {} is truncated", e.name)))?;
            if digest(chunk) != e.sha256 {
                return Err(Error::Checkpoint(format!("checksum mismatch for {}", e.name)));
            }
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(&e.shape, data)
        };
        let n_params = header.tensors.len() / 3;
        if header.tensors.len() != 3 * n_params {
            return Err(bad("tensor manifest is incomplete"));
        }
        let mut params = ParamStore::new();
        let mut first = Vec::with_capacity(n_params);
        let mut second = Vec::with_capacity(n_params);
        for (i, e) in header.tensors.iter().enumerate() {
            let t = read(e)?;
            match i / n_params {
                0 => {
                    params.push(e.name.clone(), t);
                }
                1 => first.push(t.into_data()),
                _ => second.push(t.into_data()),
            }
        }
        for (i, name) in params.names().iter().enumerate() {
            for (k, prefix) in [(1, "adam.m"), (2, "adam.v")] {
                if header.tensors[k * n_params + i].name != format!("{prefix}.{name}") {
                    return Err(Error::Checkpoint(format!("optimizer moment for {name} is missing")));
                }
            }
        }
        let end = header.tensors.last().map_or(0, |e| e.offset as usize + 8 * e.shape.iter().product::<usize>());
        if end != payload.len() {
            return Err(bad("payload length does not match the manifest"));
        }
        Ok(Self {
            optimizer: OptimizerState {
                step: header.optimizer_step,
                first_moment: first,
                second_moment: second,
                hyper: header.train.adamw(),
            },
            model_config: header.model,
            train_config: header.train,
            params,
            state: header.state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
