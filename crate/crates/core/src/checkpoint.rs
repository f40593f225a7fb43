//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SEMCAPCK"
//! version  u32
//! config   u64 length, UTF-8 TOML
//! vocab    u32 count, then per word: u32 length, UTF-8 bytes
//! tensors  u32 count, then per tensor:
//!          u32 name length, name, u32 rank, u64 per dim, f64 per value
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"SEMCAPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Run configuration with `model.feature_dim` resolved.
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let f = self
            .config
            .model
            .feature_dim
            .ok_or_else(|| Error::Checkpoint("feature dimension missing from stored config".into()))?;
        self.config.model_config(self.vocab.len(), f)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = self.config.to_toml();
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for w in self.vocab.words() {
            put_str(&mut out, w);
        }
        let named = self.params.named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = RunConfig::parse(text, &[])?;
        let count = r.u32()? as usize;
        let words = (0..count).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_words(words)?;

        let feature_dim = config
            .model
            .feature_dim
            .ok_or_else(|| Error::Checkpoint("feature dimension missing from stored config".into()))?;
        let model = config.model_config(vocab.len(), feature_dim)?;
        let mut params = ModelParams::zeros(&model);
        let expected = params.named().len();
        let stored = r.u32()? as usize;
        if stored != expected {
            return Err(Error::Checkpoint(format!("expected {expected} tensors, found {stored}")));
        }
        for (name, slot) in params.named_mut() {
            let stored_name = r.string()?;
            if stored_name != name {
                return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{stored_name}`")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {shape:?}, config implies {:?}",
                    slot.shape()
                )));
            }
            let data = (0..slot.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            *slot = Tensor::from_vec(&shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
        }
        Ok(Checkpoint { config, vocab, params })
    }

    /// Writes through a temporary file so a crash never leaves a torn file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
            f.write_all(&self.to_bytes())?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}
