//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `SELDCKPT`, a little-endian `u32` header length,
//! a JSON header, then every tensor's values in little-endian order (model
//! parameters first, then the optimizer's first and second moments). The
//! header carries names, shapes and the dtype, so loading is bit-exact.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SELDCKPT";
pub const FORMAT_VERSION: &str = "seld-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Per-epoch training log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub task: f64,
    pub rkd: Option<f64>,
    pub fkd: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: AdamConfig,
    pub step: u64,
    /// Parameters with moment tensors, in payload order.
    pub moments: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: String,
    pub role: Role,
    pub dtype: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    /// Completed epochs and optimizer steps.
    pub epochs_done: usize,
    pub steps_done: usize,
    /// Schedule length the run was started with.
    pub total_steps: usize,
    /// Digest of the frozen teacher a student was distilled from.
    pub teacher_digest: Option<String>,
    pub history: Vec<EpochLog>,
    pub tensors: Vec<TensorMeta>,
    pub optimizer: Option<OptimizerMeta>,
}

/// Header plus decoded tensors.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub store: ParamStore<T>,
    pub optimizer: Option<Adam<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Fill `header.tensors`, `header.optimizer` and `header.dtype` from the payload.
    pub fn new(
        mut header: CheckpointHeader,
        store: ParamStore<T>,
        optimizer: Option<Adam<T>>,
    ) -> Self {
        header.format_version = FORMAT_VERSION.into();
        header.dtype = T::DTYPE.into();
        header.tensors = store
            .entries()
            .iter()
            .map(|e| TensorMeta {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.is_trainable(),
            })
            .collect();
        header.optimizer = optimizer.as_ref().map(|o| OptimizerMeta {
            config: o.config,
            step: o.step,
            moments: o.moments.iter().flatten().map(|m| m.name.clone()).collect(),
        });
        Self {
            header,
            store,
            optimizer,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json =
            serde_json::to_vec(&self.header).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 12 + self.store.len() * 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.store.entries() {
            e.value.iter().for_each(|&x| x.write_le(&mut out));
        }
        if let Some(opt) = &self.optimizer {
            for m in opt.moments.iter().flatten() {
                m.m.iter().for_each(|&x| x.write_le(&mut out));
                m.v.iter().for_each(|&x| x.write_le(&mut out));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: String| Error::format(path, r);
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing checkpoint magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format {}", header.format_version)));
        }
        if header.dtype != T::DTYPE {
            return Err(bad(format!(
                "stored dtype {} but {} requested",
                header.dtype,
                T::DTYPE
            )));
        }
        let mut pos = 12 + hlen;
        let mut take = |shape: &[usize]| -> Result<ArrayD<T>> {
            let n: usize = shape.iter().product();
            let end = pos + n * T::BYTES;
            let raw = bytes
                .get(pos..end)
                .ok_or_else(|| bad("truncated payload".into()))?;
            pos = end;
            let vals = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            Ok(ArrayD::from_shape_vec(IxDyn(shape), vals).expect("length matches shape"))
        };
        let mut store = ParamStore::new();
        for t in &header.tensors {
            let kind = if t.trainable {
                ParamKind::Trainable
            } else {
                ParamKind::Buffer
            };
            store.add(t.name.clone(), take(&t.shape)?, kind);
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(meta) => {
                let mut moments = vec![None; store.len()];
                for name in &meta.moments {
                    let id = store
                        .find(name)
                        .ok_or_else(|| bad(format!("moments for unknown tensor {name}")))?;
                    let shape = store.value(id).shape().to_vec();
                    let (m, v) = (take(&shape)?, take(&shape)?);
                    moments[id.0] = Some(Moments {
                        name: name.clone(),
                        m,
                        v,
                    });
                }
                Some(Adam {
                    config: meta.config,
                    step: meta.step,
                    moments,
                })
            }
        };
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            header,
            store,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copy stored values into `dst`, which must hold exactly the same names and shapes.
    pub fn restore_into(&self, dst: &mut ParamStore<T>) -> Result<()> {
        if dst.len() != self.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                self.store.len(),
                dst.len()
            )));
        }
        for e in self.store.entries() {
            let id = dst
                .find(&e.name)
                .ok_or_else(|| Error::Config(format!("model lacks tensor {}", e.name)))?;
            let v = dst.value_mut(id);
            if v.shape() != e.value.shape() {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} vs {:?}",
                    e.name,
                    e.value.shape(),
                    v.shape()
                )));
            }
            v.assign(&e.value);
        }
        Ok(())
    }

    /// Optimizer state re-indexed to the tensor order of `dst`.
    pub fn optimizer_for(&self, dst: &ParamStore<T>) -> Option<Adam<T>> {
        let opt = self.optimizer.as_ref()?;
        let mut moments = vec![None; dst.len()];
        for m in opt.moments.iter().flatten() {
            if let Some(id) = dst.find(&m.name) {
                moments[id.0] = Some(m.clone());
            }
        }
        Some(Adam {
            config: opt.config,
            step: opt.step,
            moments,
        })
    }
}
