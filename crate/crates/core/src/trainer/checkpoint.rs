//! Versioned little-endian checkpoint with a CRC32 trailer.
//!
//! Layout: `MEVERCKP`, `u32` version, `u64` body length, body, `u32` CRC32 of
//! the body. The body holds a JSON metadata block followed by five tensor
//! groups (parameters, best parameters, two Adam moment sets, frozen
//! retriever parameters).

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamTensor;
use crate::tokenizer::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MEVERCKP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Retriever,
    Joint,
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss per claim (stage 2) or per batch (stage 1).
    pub loss: f64,
    /// Early-stopping metric after the epoch.
    pub metric: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularizer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub label_set: Vec<String>,
    pub explain: bool,
    /// Epochs completed.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochLog>,
    pub best_metric: Option<f64>,
    pub best_epoch: usize,
    pub stale: usize,
    pub finished: bool,
    pub adam_t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<ParamTensor>,
    pub best_params: Vec<ParamTensor>,
    pub adam_m: Vec<ParamTensor>,
    pub adam_v: Vec<ParamTensor>,
    /// Retriever weights carried by a joint checkpoint.
    pub frozen: Vec<ParamTensor>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors(out: &mut Vec<u8>, ts: &[ParamTensor]) {
    put_u32(out, ts.len() as u32);
    for t in ts {
        put_u32(out, t.name.len() as u32);
        out.extend_from_slice(t.name.as_bytes());
        put_u32(out, t.shape.len() as u32);
        for d in &t.shape {
            put_u64(out, *d as u64);
        }
        put_u64(out, t.data.len() as u64);
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::CorruptFile(what.to_string())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflow"))
    }

    fn tensors(&mut self) -> Result<Vec<ParamTensor>> {
        let n = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..n {
            let name_len = self.u32()? as usize;
            let name = String::from_utf8(self.take(name_len)?.to_vec()).map_err(|_| corrupt("tensor name"))?;
            let ndim = self.u32()? as usize;
            let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            let count = self.len()?;
            if shape.iter().product::<usize>() != count {
                return Err(corrupt("tensor shape and size disagree"));
            }
            let raw = self.take(count.checked_mul(8).ok_or_else(|| corrupt("length overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push(ParamTensor { name, shape, data });
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut body = Vec::new();
        put_u64(&mut body, meta.len() as u64);
        body.extend_from_slice(&meta);
        for group in [&self.params, &self.best_params, &self.adam_m, &self.adam_v, &self.frozen] {
            put_tensors(&mut body, group);
        }
        let mut out = Vec::with_capacity(body.len() + 24);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u64(&mut out, body.len() as u64);
        out.extend_from_slice(&body);
        put_u32(&mut out, crc32fast::hash(&body));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(corrupt("not a checkpoint"));
        }
        let found = r.u32()?;
        if found != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found,
            });
        }
        let body_len = r.len()?;
        let body = r.take(body_len)?;
        if r.u32()? != crc32fast::hash(body) {
            return Err(corrupt("checksum mismatch"));
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        let mut b = Reader { buf: body, pos: 0 };
        let meta_len = b.len()?;
        let meta: CheckpointMeta = serde_json::from_slice(b.take(meta_len)?).map_err(|e| corrupt(&e.to_string()))?;
        let ckpt = Checkpoint {
            meta,
            params: b.tensors()?,
            best_params: b.tensors()?,
            adam_m: b.tensors()?,
            adam_v: b.tensors()?,
            frozen: b.tensors()?,
        };
        if b.pos != body.len() {
            return Err(corrupt("trailing bytes in body"));
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    Checkpoint::from_bytes(&bytes)
}
