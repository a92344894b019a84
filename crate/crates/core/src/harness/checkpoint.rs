//! Checkpoint layout: 16-byte header (`MAGIC`, `u32` version, `u32` manifest
//! length, little-endian), a JSON manifest, then little-endian `f32` data:
//! for each group in [`GROUPS`] order, every entry's values, followed by the
//! first and second moments of its trainable entries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::{Model, GROUPS};
use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tensor};

pub const MAGIC: &[u8; 8] = b"EDTCCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GroupMeta {
    name: String,
    optimizer_step: u64,
    entries: Vec<EntryMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: String,
    config_hash: String,
    vocab_size: usize,
    step: u64,
    best_metric: f64,
    epochs_without_improvement: usize,
    groups: Vec<GroupMeta>,
}

/// Everything needed to continue training or to evaluate.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optim: [AdamState<f32>; 4],
    /// Optimizer steps taken.
    pub step: u64,
    /// Best validation BLEU-4 so far; negative before the first evaluation.
    pub best_metric: f64,
    pub epochs_without_improvement: usize,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.model.cfg.hash()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let groups = self.model.groups();
        let manifest = Manifest {
            config: self.model.cfg.to_text(),
            config_hash: self.config_hash(),
            vocab_size: self.model.vocab.size(),
            step: self.step,
            best_metric: self.best_metric,
            epochs_without_improvement: self.epochs_without_improvement,
            groups: groups
                .iter()
                .zip(GROUPS)
                .zip(&self.optim)
                .map(|((ps, name), st)| GroupMeta {
                    name: name.to_string(),
                    optimizer_step: st.step,
                    entries: ps
                        .entries()
                        .iter()
                        .map(|e| EntryMeta {
                            name: e.name.clone(),
                            shape: e.value.shape().to_vec(),
                            trainable: e.trainable,
                        })
                        .collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |t: &Tensor<f32>| t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for (ps, st) in groups.iter().zip(&self.optim) {
            for (i, e) in ps.entries().iter().enumerate() {
                push(&e.value);
                if e.trainable {
                    push(&st.m[i]);
                    push(&st.v[i]);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body_start = 16 + mlen;
        if bytes.len() < body_start {
            return Err(Error::Format("checkpoint ends inside its manifest".into()));
        }
        let m: Manifest =
            serde_json::from_slice(&bytes[16..body_start]).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        let cfg = TrainConfig::from_text(&m.config)?;
        if cfg.hash() != m.config_hash {
            return Err(Error::Format("checkpoint config hash does not match its config".into()));
        }
        let mut model = Model::new(&cfg, m.vocab_size)?;
        let mut floats = bytes[body_start..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
        if (bytes.len() - body_start) % 4 != 0 {
            return Err(Error::Format("checkpoint body is not whole f32 values".into()));
        }
        let mut take = |shape: &[usize], what: &str| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            if data.len() != n {
                return Err(Error::Format(format!("checkpoint truncated in {what}")));
            }
            Tensor::new(shape, data)
        };
        if m.groups.len() != GROUPS.len() {
            return Err(Error::Format(format!("checkpoint has {} groups", m.groups.len())));
        }
        let mut optim: Vec<AdamState<f32>> = Vec::with_capacity(4);
        for (ps, meta) in model.groups_mut().into_iter().zip(&m.groups) {
            optim.push(load_group(ps, meta, &mut take)?);
        }
        if floats.next().is_some() {
            return Err(Error::Format("checkpoint has trailing data".into()));
        }
        Ok(Self {
            model,
            optim: optim.try_into().map_err(|_| Error::Format("four optimizer states expected".into()))?,
            step: m.step,
            best_metric: m.best_metric,
            epochs_without_improvement: m.epochs_without_improvement,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn load_group(
    ps: &mut ParameterSet<f32>,
    meta: &GroupMeta,
    take: &mut dyn FnMut(&[usize], &str) -> Result<Tensor<f32>>,
) -> Result<AdamState<f32>> {
    let layout: Vec<EntryMeta> = ps
        .entries()
        .iter()
        .map(|e| EntryMeta {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            trainable: e.trainable,
        })
        .collect();
    if layout != meta.entries {
        return Err(Error::Format(format!("checkpoint group {} does not match the model layout", meta.name)));
    }
    let mut st = AdamState::new(ps);
    st.step = meta.optimizer_step;
    for (i, e) in meta.entries.iter().enumerate() {
        let id = ps.id(&e.name).expect("layout checked");
        ps.set(id, take(&e.shape, &e.name)?)?;
        if e.trainable {
            st.m[i] = take(&e.shape, &e.name)?;
            st.v[i] = take(&e.shape, &e.name)?;
        }
    }
    Ok(st)
}
