//! Versioned binary checkpoint container.
//!
//! ```text
//! magic     4 bytes  "PACK"
//! version   u32 LE
//! hlen      u64 LE   length of the JSON header
//! header    hlen bytes of UTF-8 JSON (CheckpointMeta)
//! count     u32 LE   number of tensor records
//! record*   name_len u32 | name | kind u8 | dtype u8 | rank u32 | dims u64 * rank | data LE
//! ```
//!
//! `kind`: 0 parameter, 1 first moment, 2 second moment, 3 running mean,
//! 4 running variance. `dtype`: 0 f32, 1 f64. Moments and running
//! statistics are stored in the order of the parameter and batch-norm lists.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerKind, OptimizerState};
use crate::error::{Error, Result};
use crate::nn::{build_model, Activation, BatchNormState, Model, ModelOptions, ModelSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PACK";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_FIRST: u8 = 1;
const KIND_SECOND: u8 = 2;
const KIND_MEAN: u8 = 3;
const KIND_VAR: u8 = 4;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

/// Everything in a checkpoint except the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub producer: String,
    pub spec: ModelSpec,
    pub activation: Activation,
    pub options: ModelOptions,
    pub optimizer: OptimizerKind,
    pub optimizer_step: u64,
    pub lr: f64,
    pub epoch: usize,
    pub noise_seed: u64,
    pub bn_momentum: Vec<f64>,
    pub bn_eps: Vec<f64>,
    /// Full run configuration, when written by a training run.
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor<f32>)>,
    pub bn: Vec<BatchNormState>,
    pub optimizer: OptimizerState<f32>,
}

impl Checkpoint {
    pub fn new(
        model: &Model<f32>,
        optimizer: &OptimizerState<f32>,
        epoch: usize,
        noise_seed: u64,
        run: serde_json::Value,
    ) -> Self {
        let meta = CheckpointMeta {
            producer: format!("probact {}", env!("CARGO_PKG_VERSION")),
            spec: model.spec.clone(),
            activation: model.activation,
            options: model.options.clone(),
            optimizer: optimizer.kind,
            optimizer_step: optimizer.step,
            lr: optimizer.lr,
            epoch,
            noise_seed,
            bn_momentum: model.bn.iter().map(|b| b.momentum).collect(),
            bn_eps: model.bn.iter().map(|b| b.eps).collect(),
            run,
        };
        Self {
            meta,
            params: model
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            bn: model.bn.clone(),
            optimizer: optimizer.clone(),
        }
    }

    /// Rebuilds the model, checking every parameter name and shape.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = build_model::<f32>(&self.meta.spec, self.meta.activation, self.meta.options.clone())?;
        if model.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model {} needs {}",
                self.params.len(),
                self.meta.spec,
                model.params.len()
            )));
        }
        for (id, (name, value)) in model.params.ids().collect::<Vec<_>>().into_iter().zip(&self.params) {
            let p = model.params.get_mut(id);
            if p.name != *name || p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' {:?} does not match model parameter '{}' {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        if model.bn.len() != self.bn.len() {
            return Err(Error::Checkpoint("batch-norm layer count mismatch".into()));
        }
        for (dst, src) in model.bn.iter_mut().zip(&self.bn) {
            if dst.running_mean.len() != src.running_mean.len() {
                return Err(Error::Checkpoint("batch-norm channel mismatch".into()));
            }
            *dst = src.clone();
        }
        Ok(model)
    }

    /// Checks that this checkpoint was produced for `spec`.
    pub fn ensure_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.meta.spec.layers != spec.layers {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} but {} was requested",
                self.meta.spec, spec
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);

        let mut records: Vec<(String, u8, Record)> = Vec::new();
        for (name, t) in &self.params {
            records.push((name.clone(), KIND_PARAM, Record::F32(t.clone())));
        }
        for (i, (m, v)) in self.optimizer.first.iter().zip(&self.optimizer.second).enumerate() {
            let name = self.params.get(i).map(|p| p.0.clone()).unwrap_or_default();
            records.push((name.clone(), KIND_FIRST, Record::F32(m.clone())));
            records.push((name, KIND_SECOND, Record::F32(v.clone())));
        }
        for (i, b) in self.bn.iter().enumerate() {
            let name = format!("bn_state{i}");
            records.push((
                name.clone(),
                KIND_MEAN,
                Record::F64(Tensor::from_vec(b.running_mean.clone())),
            ));
            records.push((name, KIND_VAR, Record::F64(Tensor::from_vec(b.running_var.clone()))));
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, kind, rec) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(kind);
            let shape = match &rec {
                Record::F32(t) => t.shape().to_vec(),
                Record::F64(t) => t.shape().to_vec(),
            };
            out.push(match rec {
                Record::F32(_) => DTYPE_F32,
                Record::F64(_) => DTYPE_F64,
            });
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match rec {
                Record::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Record::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header_at = r.pos;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format {
            offset: header_at as u64,
            message: format!("bad header: {e}"),
        })?;
        let count = r.u32()?;
        let mut params = Vec::new();
        let (mut first, mut second) = (Vec::new(), Vec::new());
        let (mut means, mut vars) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let at = r.pos as u64;
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Format {
                offset: at,
                message: "tensor name is not UTF-8".into(),
            })?;
            let kind = r.u8()?;
            let dtype = r.u8()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format {
                    offset: at,
                    message: "tensor size overflows".into(),
                })?;
            let rec = match dtype {
                DTYPE_F32 => {
                    let raw = r.take(n.saturating_mul(4))?;
                    Record::F32(Tensor::new(
                        shape,
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )?)
                }
                DTYPE_F64 => {
                    let raw = r.take(n.saturating_mul(8))?;
                    Record::F64(Tensor::new(
                        shape,
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )?)
                }
                d => {
                    return Err(Error::Format {
                        offset: at,
                        message: format!("unknown dtype {d} for '{name}'"),
                    })
                }
            };
            match (kind, rec) {
                (KIND_PARAM, Record::F32(t)) => params.push((name, t)),
                (KIND_FIRST, Record::F32(t)) => first.push(t),
                (KIND_SECOND, Record::F32(t)) => second.push(t),
                (KIND_MEAN, Record::F64(t)) => means.push(t.into_data()),
                (KIND_VAR, Record::F64(t)) => vars.push(t.into_data()),
                (k, _) => {
                    return Err(Error::Format {
                        offset: at,
                        message: format!("unexpected record kind {k} / dtype for '{name}'"),
                    })
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        if means.len() != vars.len() || means.len() != meta.bn_momentum.len() || means.len() != meta.bn_eps.len() {
            return Err(Error::Checkpoint("batch-norm statistics are incomplete".into()));
        }
        let bn = means
            .into_iter()
            .zip(vars)
            .zip(meta.bn_momentum.iter().zip(&meta.bn_eps))
            .map(|((running_mean, running_var), (&momentum, &eps))| BatchNormState {
                running_mean,
                running_var,
                momentum,
                eps,
            })
            .collect();
        let optimizer = OptimizerState {
            kind: meta.optimizer,
            step: meta.optimizer_step,
            lr: meta.lr,
            first,
            second,
        };
        Ok(Self {
            meta,
            params,
            bn,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

enum Record {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
