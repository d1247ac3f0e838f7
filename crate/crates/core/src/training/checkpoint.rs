//! Binary checkpoints: `SPRK` magic, u32 version, u64 header length, a JSON
//! header, then little-endian f32 arrays in manifest order.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Moments, OptimHyper, Optimizer, OptimizerKind};
use super::trainer::TrainConfig;
use crate::error::{format_err, invalid, Result};
use crate::model::{ModelConfig, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPRK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Full pre-training state.
    Model,
    /// Dense encoder export: encoder parameters only.
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryRole {
    Param,
    FirstMoment,
    SecondMoment,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: EntryRole,
    kind: ParamKind,
    shape: Vec<usize>,
    /// Byte offset into the array section.
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    kind: OptimizerKind,
    hyper: OptimHyper,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: u64,
    rng: Option<ChaCha8Rng>,
    optimizer: Option<OptimizerMeta>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: Option<ChaCha8Rng>,
    pub params: ParamStore,
    pub optimizer: Option<Optimizer>,
}

fn f32_bytes(t: &Tensor, out: &mut Vec<u8>) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut arrays = Vec::new();
        let mut push = |name: &str, role, kind, t: &Tensor, arrays: &mut Vec<u8>| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                role,
                kind,
                shape: t.shape().to_vec(),
                offset: arrays.len() as u64,
            });
            f32_bytes(t, arrays);
        };
        for (_, p) in self.params.iter() {
            push(&p.name, EntryRole::Param, p.kind, &p.value, &mut arrays);
        }
        if let Some(opt) = &self.optimizer {
            if opt.state.len() != self.params.len() {
                return Err(invalid("optimizer state does not match the parameter list"));
            }
            for ((_, p), state) in self.params.iter().zip(&opt.state) {
                if let Some(s) = state {
                    push(&p.name, EntryRole::FirstMoment, p.kind, &s.m, &mut arrays);
                    push(&p.name, EntryRole::SecondMoment, p.kind, &s.v, &mut arrays);
                }
            }
        }
        let header = Header {
            kind: self.kind,
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            rng: self.rng.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                kind: o.kind,
                hyper: o.hyper,
                step: o.step,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + arrays.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&arrays);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(format_err(format!(
                "not a checkpoint: magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..bytes.len().min(4)]),
                "SPRK"
            )));
        }
        if bytes.len() < 16 {
            return Err(format_err(format!(
                "truncated checkpoint: {} byte preamble",
                bytes.len()
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(format_err(format!(
                "unsupported checkpoint version {version} (this build reads version {VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body = &bytes[16..];
        if header_len > body.len() as u64 {
            return Err(format_err(format!(
                "truncated checkpoint: header of {} bytes, {} available",
                header_len,
                body.len()
            )));
        }
        let (json, arrays) = body.split_at(header_len as usize);
        let header: Header =
            serde_json::from_slice(json).map_err(|e| format_err(format!("corrupt checkpoint header: {e}")))?;
        let needed: u64 = header
            .tensors
            .iter()
            .map(|t| t.offset + 4 * t.shape.iter().product::<usize>() as u64)
            .max()
            .unwrap_or(0);
        if needed > arrays.len() as u64 {
            return Err(format_err(format!(
                "truncated checkpoint: {} bytes of tensor data, {} expected",
                arrays.len(),
                needed
            )));
        }
        if needed < arrays.len() as u64 {
            return Err(format_err(format!(
                "checkpoint has {} unexpected trailing bytes",
                arrays.len() as u64 - needed
            )));
        }
        let read = |e: &TensorEntry| -> Result<Tensor> {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let data = arrays[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            Tensor::new(e.shape.clone(), data)
        };
        let mut params = ParamStore::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for e in &header.tensors {
            match e.role {
                EntryRole::Param => {
                    if params.find(&e.name).is_some() {
                        return Err(format_err(format!("duplicate tensor {:?}", e.name)));
                    }
                    params.add(e.name.clone(), e.kind, read(e)?);
                }
                EntryRole::FirstMoment => first.push((e.name.clone(), read(e)?)),
                EntryRole::SecondMoment => second.push((e.name.clone(), read(e)?)),
            }
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(meta) => {
                let mut state: Vec<Option<Moments>> = vec![None; params.len()];
                if first.len() != second.len() {
                    return Err(format_err("optimizer moments are incomplete"));
                }
                for ((n1, m), (n2, v)) in first.into_iter().zip(second) {
                    let id = params
                        .find(&n1)
                        .filter(|_| n1 == n2)
                        .ok_or_else(|| format_err(format!("optimizer state for unknown tensor {n1:?}")))?;
                    state[id.index()] = Some(Moments { m, v });
                }
                Some(Optimizer {
                    kind: meta.kind,
                    hyper: meta.hyper,
                    step: meta.step,
                    state,
                })
            }
        };
        Ok(Checkpoint {
            kind: header.kind,
            model: header.model,
            train: header.train,
            step: header.step,
            rng: header.rng,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?).map_err(|e| match e {
            crate::Error::Format(msg) => format_err(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
