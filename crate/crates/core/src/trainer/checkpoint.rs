//! Checkpoint container: `SPCK`, u16 version, u32 header length, JSON header, then
//! little-endian f32 blobs in header order.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::normalize::FeatureNormalizer;
use super::{HistoryEntry, Result, TrainConfig, TrainError};
use crate::model::{BnBuffer, Model, ModelConfig, NamedTensor};
use crate::tensor::Tensor4;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BlobKind {
    Param,
    AdamM,
    AdamV,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    kind: BlobKind,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u16,
    model_config: ModelConfig,
    train_config: TrainConfig,
    normalizer: FeatureNormalizer,
    step: usize,
    epoch: usize,
    best_val: Option<f64>,
    adam_t: u64,
    history_len: usize,
    history: Vec<HistoryEntry>,
    tensors: Vec<BlobEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub normalizer: FeatureNormalizer,
    pub step: usize,
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub history: Vec<HistoryEntry>,
    pub params: Vec<NamedTensor<f32>>,
    pub buffers: Vec<BnBuffer<f32>>,
    pub adam_t: u64,
    /// Optimizer moments in `params` order; empty when not saved.
    pub adam_m: Vec<Tensor4<f32>>,
    pub adam_v: Vec<Tensor4<f32>>,
}

fn push_f32(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn shape4(s: &[usize]) -> Result<[usize; 4]> {
    s.try_into()
        .map_err(|_| TrainError::Checkpoint(format!("expected a 4-d shape, got {s:?}")))
}

impl Checkpoint {
    /// Snapshot of a model with fresh optimizer state.
    pub fn from_model(model: &Model<f32>, train_config: TrainConfig, normalizer: FeatureNormalizer) -> Self {
        Self {
            model_config: model.config().clone(),
            train_config,
            normalizer,
            step: 0,
            epoch: 0,
            best_val: None,
            history: Vec::new(),
            params: model.params().to_vec(),
            buffers: model.buffers().to_vec(),
            adam_t: 0,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blobs = Vec::new();
        for p in &self.params {
            tensors.push(BlobEntry {
                name: p.name.clone(),
                kind: BlobKind::Param,
                shape: p.value.shape().to_vec(),
            });
            push_f32(&mut blobs, p.value.data());
        }
        for (kind, moments) in [(BlobKind::AdamM, &self.adam_m), (BlobKind::AdamV, &self.adam_v)] {
            if moments.is_empty() {
                continue;
            }
            if moments.len() != self.params.len() {
                return Err(TrainError::Checkpoint(
                    "optimizer moments do not match parameters".into(),
                ));
            }
            for (p, m) in self.params.iter().zip(moments) {
                tensors.push(BlobEntry {
                    name: p.name.clone(),
                    kind,
                    shape: m.shape().to_vec(),
                });
                push_f32(&mut blobs, m.data());
            }
        }
        for b in &self.buffers {
            for (kind, v) in [(BlobKind::RunningMean, &b.mean), (BlobKind::RunningVar, &b.var)] {
                tensors.push(BlobEntry {
                    name: b.name.clone(),
                    kind,
                    shape: vec![v.len()],
                });
                push_f32(&mut blobs, v);
            }
        }
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            normalizer: self.normalizer,
            step: self.step,
            epoch: self.epoch,
            best_val: self.best_val,
            adam_t: self.adam_t,
            history_len: self.history.len(),
            history: self.history.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(10 + json.len() + blobs.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        header.model_config.validate()?;
        let mut pos = 10 + hlen;
        let mut ck = Checkpoint {
            model_config: header.model_config,
            train_config: header.train_config,
            normalizer: header.normalizer,
            step: header.step,
            epoch: header.epoch,
            best_val: header.best_val,
            history: header.history,
            params: Vec::new(),
            buffers: Vec::new(),
            adam_t: header.adam_t,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        };
        let mut pending_mean: HashMap<String, Vec<f32>> = HashMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| TrainError::Checkpoint(format!("truncated tensor `{}`", e.name)))?;
            pos += 4 * n;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            match e.kind {
                BlobKind::Param => ck.params.push(NamedTensor {
                    name: e.name,
                    value: Tensor4::from_vec(shape4(&e.shape)?, data)?,
                }),
                BlobKind::AdamM => ck.adam_m.push(Tensor4::from_vec(shape4(&e.shape)?, data)?),
                BlobKind::AdamV => ck.adam_v.push(Tensor4::from_vec(shape4(&e.shape)?, data)?),
                BlobKind::RunningMean => {
                    pending_mean.insert(e.name, data);
                }
                BlobKind::RunningVar => {
                    let mean = pending_mean
                        .remove(&e.name)
                        .ok_or_else(|| TrainError::Checkpoint(format!("variance before mean for `{}`", e.name)))?;
                    ck.buffers.push(BnBuffer {
                        name: e.name,
                        mean,
                        var: data,
                    });
                }
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensors"));
        }
        if !pending_mean.is_empty() {
            return Err(bad("running mean without variance"));
        }
        Ok(ck)
    }

    /// Atomic write (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuild the model; every stored tensor must match the configured architecture.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut m = Model::new(self.model_config.clone(), 0)?;
        if self.params.len() != m.params().len() || self.buffers.len() != m.buffers().len() {
            return Err(TrainError::Checkpoint(
                "tensor table does not match model config".into(),
            ));
        }
        let params = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let buffers = self
            .buffers
            .iter()
            .map(|b| (b.name.clone(), (b.mean.clone(), b.var.clone())))
            .collect();
        m.load_state(&params, &buffers)?;
        Ok(m)
    }
}
