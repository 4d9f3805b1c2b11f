//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MUNM" | version u16 | meta_len u32 | meta (JSON)
//! | tensor_count u32 | tensors... | sha256 of all preceding bytes
//! ```
//!
//! Each tensor is `name_len u16 | name | rank u8 | dims (u32 each) | f32
//! payload`. Parameters come first in model order, followed by the
//! optimizer accumulators named `optim.first.<param>` and
//! `optim.second.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::write_atomic;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{OptimKind, OptimState, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MUNM";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// `init`, `1`, `2a`, `2b` or `3`.
    pub stage: String,
    /// Updates completed within `stage`.
    pub step: u64,
    /// Updates the stage was configured to run.
    pub planned_steps: u64,
    pub vocab_digest: String,
    pub config_digest: String,
    /// Digest of the settings that produced this stage; a checkpoint is
    /// only resumed by a run with the same stage digest.
    pub stage_digest: String,
    pub model: ModelConfig,
    pub languages: Vec<String>,
    pub optimizer: Option<OptimKind>,
    pub optimizer_step: u64,
}

impl CheckpointMeta {
    pub fn is_complete(&self) -> bool {
        self.step >= self.planned_steps
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    pub optim: Option<OptimState>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt("checkpoint is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn get_tensor(r: &mut Reader) -> Result<(String, Tensor<f32>)> {
    let n = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(n)?)
        .map_err(|_| corrupt("tensor name is not UTF-8"))?
        .to_string();
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let len: usize = shape.iter().product();
    let bytes = r.take(len.checked_mul(4).ok_or_else(|| corrupt("tensor size overflows"))?)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let names = self.params.names();
        let n_optim = if self.optim.is_some() { 2 * names.len() } else { 0 };
        out.extend_from_slice(&((names.len() + n_optim) as u32).to_le_bytes());
        for (n, t) in names.iter().zip(self.params.tensors()) {
            put_tensor(&mut out, n, t);
        }
        if let Some(o) = &self.optim {
            for (n, t) in names.iter().zip(&o.first) {
                put_tensor(&mut out, &format!("optim.first.{n}"), t);
            }
            for (n, t) in names.iter().zip(&o.second) {
                put_tensor(&mut out, &format!("optim.second.{n}"), t);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 2 || &buf[..4] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        if buf.len() < 32 + 6 {
            return Err(corrupt("checkpoint is truncated"));
        }
        let (body, sum) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch (truncated or corrupted file)"));
        }
        let mut r = Reader { buf: body, pos: 6 };
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(get_tensor(&mut r)?);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after tensors"));
        }
        let n = meta.model.tensor_count();
        let with_optim = meta.optimizer.is_some();
        let want = if with_optim { 3 * n } else { n };
        if count != want {
            return Err(corrupt(format!("expected {want} tensors, found {count}")));
        }
        let mut rest = tensors.split_off(n);
        let params = ModelParams::from_named(&meta.model, tensors)?;
        let optim = match meta.optimizer {
            Some(kind) => {
                let second = rest.split_off(n);
                let first = rest;
                for (prefix, set) in [("optim.first.", &first), ("optim.second.", &second)] {
                    for ((name, t), p) in set.iter().zip(params.names().iter().zip(params.tensors())) {
                        if name.strip_prefix(prefix) != Some(p.0.as_str()) || t.shape() != p.1.shape() {
                            return Err(corrupt(format!("optimizer tensor {name} does not match its parameter")));
                        }
                    }
                }
                Some(OptimState {
                    kind,
                    step: meta.optimizer_step,
                    first: first.into_iter().map(|(_, t)| t).collect(),
                    second: second.into_iter().map(|(_, t)| t).collect(),
                })
            }
            None => None,
        };
        Ok(Self { meta, params, optim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless the checkpoint was written for this vocabulary and
    /// configuration.
    pub fn check_digests(&self, vocab_digest: &str, config_digest: &str) -> Result<()> {
        if self.meta.vocab_digest != vocab_digest {
            return Err(Error::Checkpoint(format!(
                "vocabulary digest {} does not match the active vocabulary {vocab_digest}",
                self.meta.vocab_digest
            )));
        }
        if self.meta.config_digest != config_digest {
            return Err(Error::Checkpoint(format!(
                "config digest {} does not match the active configuration {config_digest}",
                self.meta.config_digest
            )));
        }
        Ok(())
    }
}
