//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (model config, training state, tensor index, batch-norm running
//! statistics), then every tensor as little-endian `f64` in index order.
//! Files are written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use onh_tensor::{Shape, Tensor};
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use super::{TrainConfig, TrainState};
use crate::data_pipeline::CanonicalStats;
use crate::networks::{Model, ModelConfig};
use crate::nn_core::{BnRunning, Params};
use crate::{CoreError, Result};

const MAGIC: &[u8; 8] = b"ONHCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    t: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train_config: Option<TrainConfig>,
    state: Option<TrainState>,
    canonical: Option<CanonicalStats>,
    depth_scaling: Option<(f64, f64)>,
    batch_norm: Vec<BnRunning>,
    adam: Option<AdamMeta>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<Adam>,
    pub state: Option<TrainState>,
    pub train_config: Option<TrainConfig>,
    pub canonical: Option<CanonicalStats>,
    /// Dataset-level depth range mapped onto `[0, 1]`.
    pub depth_scaling: Option<(f64, f64)>,
    /// Free-form run facts, such as the guide source of a segmentation model.
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            state: None,
            train_config: None,
            canonical: None,
            depth_scaling: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let params = &self.model.params;
        let mut tensors: Vec<(String, &Tensor)> =
            params.ids().map(|id| (params.name(id).to_string(), params.get(id))).collect();
        if let Some(adam) = &self.optimizer {
            for id in params.ids() {
                tensors.push((format!("adam.m.{}", params.name(id)), &adam.m[id.0]));
            }
            for id in params.ids() {
                tensors.push((format!("adam.v.{}", params.name(id)), &adam.v[id.0]));
            }
        }
        let header = Header {
            model: self.model.config.clone(),
            train_config: self.train_config.clone(),
            state: self.state.clone(),
            canonical: self.canonical,
            depth_scaling: self.depth_scaling,
            batch_norm: params.bn_states().to_vec(),
            adam: self.optimizer.as_ref().map(|a| AdamMeta {
                config: a.config,
                t: a.t,
            }),
            metadata: self.metadata.clone(),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().0,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(json.len() + 20 + 8 * tensors.iter().map(|(_, t)| t.len()).sum::<usize>());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bad = |m: String| CoreError::Format {
            path: path.to_path_buf(),
            message: m,
        };
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut offset = 20 + hlen;
        let mut stored = std::collections::HashMap::new();
        for e in &header.tensors {
            let shape = Shape(e.shape);
            let n = shape.numel();
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad(format!("truncated tensor {}", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            stored.insert(e.name.clone(), Tensor::from_vec(shape, data)?);
            offset += 8 * n;
        }

        let (arch, builder) = Model::describe(&header.model)?;
        let mut params = builder.materialize(0);
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_string();
            let t = stored
                .remove(&name)
                .ok_or_else(|| CoreError::Checkpoint(format!("missing parameter {name}")))?;
            params.set(id, t)?;
        }
        load_bn(&mut params, &header.batch_norm, true)?;
        let optimizer = match &header.adam {
            None => None,
            Some(meta) => {
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for id in params.ids() {
                    let name = params.name(id);
                    let take = |stored: &mut std::collections::HashMap<String, Tensor>, key: String| {
                        stored
                            .remove(&key)
                            .ok_or_else(|| CoreError::Checkpoint(format!("missing optimizer state {key}")))
                    };
                    m.push(take(&mut stored, format!("adam.m.{name}"))?);
                    v.push(take(&mut stored, format!("adam.v.{name}"))?);
                }
                Some(Adam {
                    config: meta.config,
                    t: meta.t,
                    m,
                    v,
                })
            }
        };
        if let Some(extra) = stored.keys().next() {
            return Err(CoreError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            model: Model {
                config: header.model,
                arch,
                params,
            },
            optimizer,
            state: header.state,
            train_config: header.train_config,
            canonical: header.canonical,
            depth_scaling: header.depth_scaling,
            metadata: header.metadata,
        })
    }
}

fn load_bn(params: &mut Params, stored: &[BnRunning], strict: bool) -> Result<usize> {
    let mut copied = 0;
    for state in params.bn_states_mut() {
        match stored.iter().find(|s| s.name == state.name) {
            Some(s) if s.mean.len() == state.mean.len() => {
                *state = s.clone();
                copied += 1;
            }
            _ if strict => {
                return Err(CoreError::Checkpoint(format!("missing running statistics {}", state.name)));
            }
            _ => {}
        }
    }
    Ok(copied)
}

/// Copies every parameter and running statistic whose name and shape match.
/// Returns the number of parameter tensors copied.
pub fn warm_start(target: &mut Params, source: &Params) -> Result<usize> {
    let mut copied = 0;
    for id in target.ids().collect::<Vec<_>>() {
        if let Some(sid) = source.find(target.name(id)) {
            if source.get(sid).shape() == target.get(id).shape() {
                target.set(id, source.get(sid).clone())?;
                copied += 1;
            }
        }
    }
    load_bn(target, source.bn_states(), false)?;
    Ok(copied)
}

/// Initializes `model` from a checkpoint of the same architecture.
pub fn fine_tune_init(model: &mut Model, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.model.config != model.config {
        return Err(CoreError::Checkpoint(format!(
            "{} holds a different architecture than the configured model",
            path.display()
        )));
    }
    model.params = ckpt.model.params.clone();
    Ok(ckpt)
}
