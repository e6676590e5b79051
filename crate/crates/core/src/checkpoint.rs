//! Binary checkpoints: model, vocabulary, run metadata and optimizer state.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "TMMCKPT\0"
//! version      u32       1
//! header_len   u64
//! header       JSON, header_len bytes (task, scheme, model config,
//!              vocabulary tokens, metadata, optimizer config and step)
//! array_count  u64
//! per array:
//!   name_len   u32
//!   name       UTF-8, name_len bytes
//!   rank       u32
//!   dims       rank x u64
//!   data       product(dims) x f64
//! ```
//!
//! Arrays are the model parameters in their fixed order, then, when an
//! optimizer state is stored, `adam.m.<name>` and `adam.v.<name>` for each.
//! Writing is a pure function of the contents, so save, load, save gives the
//! same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Task;
use crate::encoder::{ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::optimizer::{AdamConfig, AdamState};
use crate::tokenizer::Vocab;
use crate::train::{Model, RunOutcome, Scheme};

pub const MAGIC: &[u8; 8] = b"TMMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_dev_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Option<AdamState>,
    pub meta: CheckpointMeta,
}

impl From<&RunOutcome> for Checkpoint {
    fn from(run: &RunOutcome) -> Self {
        Self {
            model: run.model.clone(),
            adam: Some(run.adam.clone()),
            meta: CheckpointMeta {
                seed: run.seed,
                best_epoch: run.best_epoch,
                best_dev_macro_f1: Some(run.best_dev_macro_f1).filter(|v| v.is_finite()),
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    task: Task,
    scheme: Scheme,
    model: ModelConfig,
    vocab_min_frequency: usize,
    vocab: Vec<String>,
    meta: CheckpointMeta,
    adam: Option<AdamHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
}

fn put_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend((d as u64).to_le_bytes());
    }
    for v in data {
        out.extend(v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let header = Header {
            task: m.task,
            scheme: m.scheme,
            model: m.config.clone(),
            vocab_min_frequency: m.vocab.min_frequency(),
            vocab: m.vocab.tokens().to_vec(),
            meta: self.meta.clone(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                config: a.config,
                step: a.step,
            }),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((header.len() as u64).to_le_bytes());
        out.extend(&header);

        let names = m.params.names();
        let tensors = m.params.tensors();
        let arrays = names.len() * if self.adam.is_some() { 3 } else { 1 };
        out.extend((arrays as u64).to_le_bytes());
        for (n, t) in names.iter().zip(tensors) {
            put_array(&mut out, n, t.shape(), t.data());
        }
        if let Some(a) = &self.adam {
            for (prefix, moments) in [("adam.m.", &a.first_moment), ("adam.v.", &a.second_moment)] {
                for ((n, t), v) in names.iter().zip(tensors).zip(moments) {
                    put_array(&mut out, &format!("{prefix}{n}"), t.shape(), v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
        let count = r.u64()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            arrays.push(r.array()?);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }

        let malformed = |e: &dyn std::fmt::Display| CheckpointError::Malformed(e.to_string());
        let vocab = Vocab::from_tokens(header.vocab, header.vocab_min_frequency).map_err(|e| malformed(&e))?;
        if vocab.len() != header.model.vocab_size {
            return Err(CheckpointError::Malformed("vocabulary size disagrees with model config".into()));
        }
        let expected = ModelParams::init(&header.model, 0).map_err(|e| malformed(&e))?;
        let n = expected.names().len();
        let wanted = n * if header.adam.is_some() { 3 } else { 1 };
        if arrays.len() != wanted {
            return Err(CheckpointError::Malformed(format!(
                "expected {wanted} arrays, found {}",
                arrays.len()
            )));
        }
        let mut rest = arrays.split_off(n);
        let params = ModelParams::from_named(&header.model, arrays).map_err(|e| malformed(&e))?;
        let adam = match header.adam {
            None => None,
            Some(h) => {
                let second = rest.split_off(n);
                let moments = |prefix: &str, arrays: Vec<(String, Tensor)>| {
                    arrays
                        .into_iter()
                        .zip(params.names().iter().zip(params.tensors()))
                        .map(|((name, t), (pn, pt))| {
                            if name != format!("{prefix}{pn}") || t.shape() != pt.shape() {
                                return Err(CheckpointError::Malformed(format!("unexpected array {name}")));
                            }
                            Ok(t.into_data())
                        })
                        .collect::<Result<Vec<_>, _>>()
                };
                Some(AdamState {
                    config: h.config,
                    step: h.step,
                    first_moment: moments("adam.m.", rest)?,
                    second_moment: moments("adam.v.", second)?,
                })
            }
        };
        Ok(Self {
            model: Model {
                task: header.task,
                scheme: header.scheme,
                config: header.model,
                params,
                vocab,
            },
            adam,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn array(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        if !(1..=3).contains(&rank) {
            return Err(CheckpointError::Malformed(format!("array {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or(CheckpointError::Truncated(self.pos))?;
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("array {name}: {e}")))?;
        Ok((name, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_vocab_with;

    fn small() -> Checkpoint {
        let vocab = build_vocab_with([vec!["the", "salmon", "is", "tasty"]], 1, &["food"]).unwrap();
        let config = ModelConfig::toy(vocab.len());
        let model = Model::new(Task::Atsa, Scheme::Tmm, config, vocab, 3).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), model.params.tensors());
        adam.step = 17;
        adam.first_moment[0][0] = 0.25;
        adam.second_moment[1][2] = -1.5e-300;
        Checkpoint {
            model,
            adam: Some(adam),
            meta: CheckpointMeta {
                seed: 3,
                best_epoch: 4,
                best_dev_macro_f1: Some(0.1 + 0.2),
            },
        }
    }

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let ck = small();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..8], MAGIC);

        let no_adam = Checkpoint { adam: None, ..ck };
        let b2 = no_adam.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&b2).unwrap(), no_adam);
    }

    #[test]
    fn rejects_damage() {
        let bytes = small().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::UnsupportedVersion(9))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::Malformed(_))));
    }
}
