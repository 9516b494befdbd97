//! Self-describing parameter checkpoints.
//!
//! Layout: `b"ILILT001"`, a little-endian `u32` header length, the JSON
//! header, then every parameter as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ILILT001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub step: u64,
    pub backbone: serde_json::Value,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

/// Named tensors plus the model description needed to rebuild them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone: serde_json::Value,
    pub meta: serde_json::Value,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            dtype: "f32".into(),
            step: self.step,
            backbone: self.backbone.clone(),
            meta: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len())
            .map_err(|_| Error::Checkpoint("header too large".into()))?;
        let total: usize = self.params.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(12 + json.len() + 4 * total);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.params {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| err("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        if header.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
        }
        let mut pos = 12 + len;
        let mut params = Vec::with_capacity(header.params.len());
        for entry in &header.params {
            let n: usize = entry.shape.iter().product();
            let blob = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated blob for {}", entry.name)))?;
            let data = blob
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            params.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
            pos += 4 * n;
        }
        if pos != bytes.len() {
            return Err(err("trailing bytes"));
        }
        Ok(Self {
            backbone: header.backbone,
            meta: header.meta,
            step: header.step,
            params,
        })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        let tmp = path.with_file_name(format!(
            ".{}.tmp{}",
            path.file_name().and_then(|s| s.to_str()).unwrap_or("ckpt"),
            std::process::id()
        ));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
