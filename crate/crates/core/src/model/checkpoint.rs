//! Checkpoint directory: `model.bin`, `vocab.json`, `config.json`, and the
//! training run's `metrics.jsonl`.
//!
//! `model.bin` is a versioned little-endian record list: magic `LDCK`, a u32
//! version, a u32 tensor count, then per tensor its name (u32 length + UTF-8),
//! its rank and dims (u32 each) and the `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use leak_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::Seq2Seq;
use crate::config::{ModelConfig, Regime, TrainConfig};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LDCK";

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Schema(format!("model file truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Schema(format!("{} is not a model file", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!("model file version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Schema("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if store.id(&name).is_ok() {
            return Err(Error::Schema(format!("parameter {name} appears twice")));
        }
        store.add(name, Tensor::new(shape, data)?);
    }
    if r.at != buf.len() {
        return Err(Error::Schema("trailing bytes after the last tensor".into()));
    }
    Ok(store)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub regime: Regime,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_smatch: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Seq2Seq,
    pub vocab: Vocabulary,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_params(&self.model.store, &dir.join("model.bin"))?;
        self.vocab.save(&dir.join("vocab.json"))?;
        let cfg = dir.join("config.json");
        std::fs::write(&cfg, serde_json::to_string_pretty(&self.meta)? + "\n").map_err(|e| Error::io(&cfg, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = dir.join("config.json");
        let text = std::fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!("checkpoint version {}, expected {CHECKPOINT_VERSION}", meta.version)));
        }
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        if vocab.len() != meta.model.vocab_size {
            return Err(Error::Schema(format!(
                "vocabulary has {} symbols, model expects {}",
                vocab.len(),
                meta.model.vocab_size
            )));
        }
        let store = load_params(&dir.join("model.bin"))?;
        let mut model = Seq2Seq::new(meta.model.clone(), 0)?;
        model.load_values(&store)?;
        Ok(Self { model, vocab, meta })
    }
}
