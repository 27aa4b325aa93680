//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` version, then tagged blocks, each a 4-byte
//! tag and a `u64` payload length. Blocks: `CONF` (model config as JSON),
//! `VOCA` (vocabulary TSV), `META` (completed training stages as JSON),
//! `TENS` (named tensors). Integers and floats are
//! little-endian; tensors are row-major `f64` with a `rows, cols` header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Tensor, Transformer};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DXRKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Transformer,
    pub vocab: Vocabulary,
    /// Training stages this model has been through, oldest first.
    pub stages: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    stages: Vec<String>,
}

impl ModelCheckpoint {
    pub fn new(model: Transformer, vocab: Vocabulary) -> Result<Self> {
        if model.vocab_size() != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "model vocab_size {} differs from vocabulary size {}",
                model.vocab_size(),
                vocab.len()
            )));
        }
        Ok(ModelCheckpoint {
            model,
            vocab,
            stages: Vec::new(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_block(&mut out, b"CONF", &serde_json::to_vec(self.model.config())?);
        write_block(&mut out, b"VOCA", self.vocab.to_tsv().as_bytes());
        let meta = Meta {
            stages: self.stages.clone(),
        };
        write_block(&mut out, b"META", &serde_json::to_vec(&meta)?);

        let params = self.model.params();
        let mut tens = Vec::new();
        tens.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params.names().iter().zip(params.values()) {
            tens.extend_from_slice(&(name.len() as u32).to_le_bytes());
            tens.extend_from_slice(name.as_bytes());
            tens.extend_from_slice(&(t.rows as u64).to_le_bytes());
            tens.extend_from_slice(&(t.cols as u64).to_le_bytes());
            for v in &t.data {
                tens.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_block(&mut out, b"TENS", &tens);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut config: Option<ModelConfig> = None;
        let mut vocab: Option<Vocabulary> = None;
        let mut tensors: Option<Vec<(String, Tensor)>> = None;
        let mut meta: Option<Meta> = None;
        while r.pos < r.buf.len() {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            match &tag {
                b"CONF" => config = Some(serde_json::from_slice(payload)?),
                b"VOCA" => {
                    let text = std::str::from_utf8(payload)
                        .map_err(|_| Error::Checkpoint("vocabulary block is not UTF-8".into()))?;
                    vocab = Some(Vocabulary::from_tsv(text)?);
                }
                b"META" => meta = Some(serde_json::from_slice(payload)?),
                b"TENS" => tensors = Some(read_tensors(payload)?),
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unknown block `{}`",
                        String::from_utf8_lossy(other)
                    )))
                }
            }
        }
        let missing = |b: &str| Error::Checkpoint(format!("missing {b} block"));
        let config = config.ok_or_else(|| missing("CONF"))?;
        let vocab = vocab.ok_or_else(|| missing("VOCA"))?;
        let tensors = tensors.ok_or_else(|| missing("TENS"))?;
        let model = Transformer::from_parameters(config, tensors)?;
        if let Some(name) = model.params().first_non_finite() {
            return Err(Error::NonFinite(format!("checkpoint tensor `{name}`")));
        }
        let mut ck = ModelCheckpoint::new(model, vocab)?;
        ck.stages = meta.ok_or_else(|| missing("META"))?.stages;
        Ok(ck)
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s == stage)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_block(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
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
}

fn read_tensors(payload: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: payload, pos: 0 };
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` shape overflows")))?;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(rows, cols, data)));
    }
    if r.pos != payload.len() {
        return Err(Error::Checkpoint("trailing bytes in tensor block".into()));
    }
    Ok(out)
}
