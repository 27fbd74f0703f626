//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `ECKP`, `u32` version, `u64` vocabulary
//! hash, `u32` length + JSON metadata, `u32` tensor count, then per tensor a
//! `u32` length + UTF-8 name, `u32` rank, `u32` dims and the `f64` payload.
//! A trailing `u32` CRC-32 covers every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::autodiff::{Params, Tensor};
use crate::decoder::{CaptionModel, ModelConfig};
use crate::embedding::{Reader, Vocabulary};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ECKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub train_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub vocab_hash: u64,
    pub params: Params,
}

impl Checkpoint {
    pub fn from_model(model: &CaptionModel, train: &TrainConfig, vocab: &Vocabulary, epoch: usize, train_loss: Option<f64>) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model: model.config().clone(),
                train: train.clone(),
                epoch,
                train_loss,
            },
            vocab_hash: vocab.hash(),
            params: model.params().clone(),
        }
    }

    pub fn model(&self) -> Result<CaptionModel> {
        CaptionModel::from_params(self.meta.model.clone(), &self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.vocab_hash.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        b.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        b.extend_from_slice(&meta);
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for id in self.params.ids() {
            let name = self.params.name(id).as_bytes();
            let t = self.params.value(id);
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name);
            b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 + 4 + 4 {
            return Err(Error::format(path, "truncated file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if &body[..4] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let mut r = Reader {
            bytes: body,
            pos: 4,
            path,
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let vocab_hash = r.u64()?;
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::format(path, e.to_string()))?;
        let count = r.u32()? as usize;
        let mut params = Params::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.add(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != body.len() {
            return Err(Error::format(path, "trailing bytes after tensors"));
        }
        Ok(Checkpoint {
            meta,
            vocab_hash,
            params,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Loads and refuses a checkpoint trained against another vocabulary.
    pub fn load_for(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.vocab_hash != vocab.hash() {
            return Err(Error::VocabMismatch {
                checkpoint: ck.vocab_hash,
                embeddings: vocab.hash(),
            });
        }
        Ok(ck)
    }
}
