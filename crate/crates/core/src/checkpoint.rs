//! Binary checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic      8 bytes  "EVCKPT01"
//! version    u16      1
//! digest     32 bytes SHA-256 of the config JSON below
//! config     u32 length + UTF-8 JSON (ModelConfig)
//! meta       u32 length + UTF-8 JSON (CheckpointMeta)
//! count      u32
//! tensor     u16 name length, name, u8 rank, u64 × rank dims,
//!            u8 dtype (0 = f64), f64 payload
//! ```
//!
//! Tensors are the model parameters and batch-norm buffers under their
//! model names, plus Adam moments under `adam.m.<name>` / `adam.v.<name>`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EVCKPT01";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed training epochs.
    pub epoch: u64,
    pub adam_step: Option<u64>,
    pub best_top1: Option<f64>,
    pub best_epoch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(model: &Model, adam: Option<&AdamState>, mut meta: CheckpointMeta) -> Self {
        let params = model.named_params();
        let mut tensors: Vec<(String, Tensor)> = params
            .iter()
            .chain(model.named_buffers().iter())
            .map(|(n, t)| (n.clone(), (*t).clone()))
            .collect();
        if let Some(st) = adam {
            meta.adam_step = Some(st.step);
            for ((name, _), m) in params.iter().zip(&st.m) {
                tensors.push((format!("adam.m.{name}"), m.clone()));
            }
            for ((name, _), v) in params.iter().zip(&st.v) {
                tensors.push((format!("adam.v.{name}"), v.clone()));
            }
        } else {
            meta.adam_step = None;
        }
        Self {
            config: model.config.clone(),
            meta,
            tensors,
        }
    }

    pub fn digest(&self) -> String {
        self.config.digest()
    }

    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let (ours, theirs) = (self.digest(), config.digest());
        if ours != theirs {
            return Err(Error::ConfigDigestMismatch {
                checkpoint: ours,
                config: theirs,
            });
        }
        Ok(())
    }

    fn lookup(&self) -> HashMap<&str, &Tensor> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    fn fill(map: &HashMap<&str, &Tensor>, name: &str, dst: &mut Tensor) -> Result<()> {
        let src = map.get(name).ok_or_else(|| {
            Error::InvalidConfig(format!("checkpoint has no tensor named {name}"))
        })?;
        if src.shape() != dst.shape() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint tensor {name} is {:?}, model expects {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = (*src).clone();
        Ok(())
    }

    pub fn restore_model(&self) -> Result<Model> {
        let mut model = build_model(&self.config, 0)?;
        let map = self.lookup();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, dst) in names.iter().zip(model.params_mut()) {
            Self::fill(&map, name, dst)?;
        }
        let names: Vec<String> = model.named_buffers().into_iter().map(|(n, _)| n).collect();
        for (name, dst) in names.iter().zip(model.buffers_mut()) {
            Self::fill(&map, name, dst)?;
        }
        Ok(model)
    }

    /// Optimizer state, if the checkpoint carries one.
    pub fn restore_adam(&self, model: &Model) -> Result<Option<AdamState>> {
        let Some(step) = self.meta.adam_step else {
            return Ok(None);
        };
        let map = self.lookup();
        let params = model.named_params();
        let mut st = AdamState::new(params.iter().map(|(_, t)| *t));
        st.step = step;
        for (i, (name, _)) in params.iter().enumerate() {
            Self::fill(&map, &format!("adam.m.{name}"), &mut st.m[i])?;
            Self::fill(&map, &format!("adam.v.{name}"), &mut st.v[i])?;
        }
        Ok(Some(st))
    }

    pub fn encode(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&config));
        for blob in [&config, &meta] {
            out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
            out.extend_from_slice(blob);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(DTYPE_F64);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(format!("checkpoint version {version}")));
        }
        let digest = r.take(32)?.to_vec();
        let config_at = r.pos;
        let config_len = r.u32()? as usize;
        let config_bytes = r.take(config_len)?;
        if Sha256::digest(config_bytes).as_slice() != digest {
            return Err(r.malformed(config_at, "config digest does not match embedded config"));
        }
        let config: ModelConfig = serde_json::from_slice(config_bytes)?;
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.malformed(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(r.malformed(at, &format!("unknown dtype tag {dtype} for {name}")));
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8).map(|b| (n, b)))
                .ok_or_else(|| r.malformed(at, "tensor size overflows"))?;
            let payload = r.take(n.1)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(r.malformed(r.pos, "trailing bytes after last tensor"));
        }
        Ok(Self {
            config,
            meta,
            tensors,
        })
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::from(e).in_file(&tmp))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::decode(&bytes).map_err(|e| e.in_file(path))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::TruncatedRecord {
                offset: self.pos,
                remaining: self.bytes.len() - self.pos,
            }),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn malformed(&self, offset: usize, reason: &str) -> Error {
        Error::MalformedHeader {
            offset,
            reason: reason.to_string(),
        }
    }
}
