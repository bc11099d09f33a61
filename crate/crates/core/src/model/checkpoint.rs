//! `FVLB` checkpoint files: 4-byte magic, u32 LE header length, UTF-8 JSON
//! header, then little-endian f32 parameters in declared order followed by
//! each batchnorm layer's running mean and variance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ResNetLite};
use crate::autodiff::RunningStats;
use crate::dataset::ClassTable;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::{EpochRecord, TrainConfig};
use crate::transforms::VariantKind;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FVLB";
pub const SCHEMA_VERSION: u32 = 1;

/// Everything stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub classes: ClassTable,
    pub epoch: usize,
    pub variant: Option<VariantKind>,
    pub seeds: BTreeMap<String, u64>,
    pub train_config: Option<TrainConfig>,
    pub history: Vec<EpochRecord>,
}

impl CheckpointMeta {
    pub fn untrained(classes: ClassTable) -> Self {
        CheckpointMeta {
            classes,
            epoch: 0,
            variant: None,
            seeds: BTreeMap::new(),
            train_config: None,
            history: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ResNetLite,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct StatsEntry {
    name: String,
    channels: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
    running_stats: Vec<StatsEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.model;
        if self.meta.classes.len() != model.config().classes {
            return Err(Error::Checkpoint(format!(
                "class table has {} names but the model has {} outputs",
                self.meta.classes.len(),
                model.config().classes
            )));
        }
        let header = Header {
            schema_version: SCHEMA_VERSION,
            config: model.config().clone(),
            meta: self.meta.clone(),
            tensors: model
                .param_names()
                .iter()
                .zip(model.params())
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            running_stats: model
                .config()
                .norm_layout()
                .into_iter()
                .map(|(name, channels)| StatsEntry { name, channels })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let floats: usize = model.num_parameters() + model.running_stats().iter().map(|r| 2 * r.channels()).sum::<usize>();
        let mut out = Vec::with_capacity(8 + json.len() + 4 * floats);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let values = model
            .params()
            .iter()
            .flat_map(|t| t.data().iter())
            .chain(model.running_stats().iter().flat_map(|r| r.mean.iter().chain(&r.var)));
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing FVLB magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if header_len > body.len() {
            return Err(Error::Checkpoint(format!(
                "truncated header: {header_len} bytes declared, {} available",
                body.len()
            )));
        }
        let probe: serde_json::Value = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::Checkpoint(format!("header is not valid JSON: {e}")))?;
        match probe.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "schema version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::Checkpoint("header has no schema_version".into())),
        }
        let header: Header =
            serde_json::from_value(probe).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        header.config.validate()?;

        let layout = header.config.parameter_layout();
        let listed: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if listed != layout {
            return Err(Error::Checkpoint("tensor list does not match the configured architecture".into()));
        }
        let norms = header.config.norm_layout();
        let listed: Vec<(String, usize)> = header.running_stats.iter().map(|s| (s.name.clone(), s.channels)).collect();
        if listed != norms {
            return Err(Error::Checkpoint("running-stat list does not match the configured architecture".into()));
        }
        if header.meta.classes.len() != header.config.classes {
            return Err(Error::Checkpoint("class table size does not match the model".into()));
        }

        let payload = &body[header_len..];
        let expected: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>()
            + norms.iter().map(|(_, c)| 2 * c).sum::<usize>();
        if payload.len() != 4 * expected {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, architecture needs {}",
                payload.len(),
                4 * expected
            )));
        }
        let mut floats = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
        let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };
        let params = layout
            .into_iter()
            .map(|(_, shape)| {
                let n = shape.iter().product();
                Tensor::new(shape, take(n))
            })
            .collect::<Result<Vec<_>>>()?;
        let running = norms
            .iter()
            .map(|&(_, c)| RunningStats {
                mean: take(c),
                var: take(c),
            })
            .collect();
        let model = ResNetLite::from_parts(header.config, params, running)?;
        Ok(Checkpoint {
            model,
            meta: header.meta,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
