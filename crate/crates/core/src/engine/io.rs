//! `model.desc` (JSON descriptor) + `model.bin` (little-endian `f64` tensors
//! followed by an FNV-1a 64 checksum of everything before it).

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ModelDims, ModelState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linguistic::{GraphKind, LinguisticPathway};
use crate::numerics::{AdamState, ParamId, ParamStore, Parameter, Tensor};
use crate::objectives::LossWeights;
use crate::visual::VisualPathway;

pub const MODEL_VERSION: u32 = 1;
pub const DESC_FILE: &str = "model.desc";
pub const BIN_FILE: &str = "model.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    AdamFirst,
    AdamSecond,
    FixedAdjacency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into `model.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    pub version: u32,
    pub visual_dim: usize,
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub attribute_count: usize,
    pub object_count: usize,
    pub graph_kind: GraphKind,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub adam_steps: Vec<u64>,
    pub payload_bytes: u64,
    pub tensors: Vec<TensorEntry>,
    pub config: RunConfig,
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Serializes a model to its descriptor text and blob bytes.
pub fn encode_model(model: &ModelState) -> Result<(String, Vec<u8>)> {
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: &str, role: TensorRole, t: &Tensor, blob: &mut Vec<u8>| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            role,
            rows: t.rows(),
            cols: t.cols(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in model.store.iter() {
        push(&p.name, TensorRole::Param, &p.value, &mut blob);
    }
    for (p, s) in model.store.iter().zip(&model.adam) {
        push(&p.name, TensorRole::AdamFirst, &s.first_moment, &mut blob);
        push(&p.name, TensorRole::AdamSecond, &s.second_moment, &mut blob);
    }
    if let Some(a) = &model.linguistic.fixed_normalized {
        push("gcn.adjacency_normalized", TensorRole::FixedAdjacency, a, &mut blob);
    }
    let desc = ModelDescriptor {
        version: MODEL_VERSION,
        visual_dim: model.dims.visual_dim,
        embed_dim: model.dims.embed_dim,
        latent_dim: model.latent_dim(),
        attribute_count: model.dims.attribute_count,
        object_count: model.dims.object_count,
        graph_kind: model.linguistic.spec.kind,
        loss_weights: model.config().loss_weights(),
        seed: model.seed(),
        adam_steps: model.adam.iter().map(|s| s.step_count).collect(),
        payload_bytes: blob.len() as u64,
        tensors,
        config: model.config().clone(),
    };
    let sum = checksum(&blob);
    blob.extend_from_slice(&sum.to_le_bytes());
    let mut text = serde_json::to_string_pretty(&desc)?;
    text.push('\n');
    Ok((text, blob))
}

pub fn save_model(model: &ModelState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (desc, blob) = encode_model(model)?;
    let dp = dir.join(DESC_FILE);
    std::fs::write(&dp, desc).map_err(|e| Error::io(&dp, e))?;
    let bp = dir.join(BIN_FILE);
    std::fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))
}

pub fn load_model(dir: &Path) -> Result<ModelState> {
    let dp = dir.join(DESC_FILE);
    let text = std::fs::read_to_string(&dp).map_err(|e| Error::io(&dp, e))?;
    let bp = dir.join(BIN_FILE);
    let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    decode_model(&text, &blob)
}

fn read_tensor(payload: &[u8], e: &TensorEntry) -> Result<Tensor> {
    let len = e.rows * e.cols;
    let start = e.offset as usize;
    let end = len
        .checked_mul(8)
        .and_then(|n| start.checked_add(n))
        .filter(|&end| end <= payload.len())
        .ok_or_else(|| {
            Error::ModelFormat(format!(
                "tensor `{}` ({}x{} at byte {}) runs past the {}-byte payload",
                e.name,
                e.rows,
                e.cols,
                e.offset,
                payload.len()
            ))
        })?;
    let data = payload[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::from_vec(e.rows, e.cols, data)
}

pub fn decode_model(desc_text: &str, blob: &[u8]) -> Result<ModelState> {
    let desc: ModelDescriptor =
        serde_json::from_str(desc_text).map_err(|e| Error::ModelFormat(format!("descriptor: {e}")))?;
    if desc.version != MODEL_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported model version {} (expected {MODEL_VERSION})",
            desc.version
        )));
    }
    if blob.len() < 8 {
        return Err(Error::ModelFormat(format!("blob truncated to {} bytes", blob.len())));
    }
    let (payload, tail) = blob.split_at(blob.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
    let computed = checksum(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if payload.len() as u64 != desc.payload_bytes {
        return Err(Error::ModelFormat(format!(
            "descriptor declares {} payload bytes, blob holds {}",
            desc.payload_bytes,
            payload.len()
        )));
    }
    let declared: usize = desc.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if declared != payload.len() {
        return Err(Error::ModelFormat(format!(
            "tensor shapes account for {declared} bytes, payload holds {}",
            payload.len()
        )));
    }

    let config = desc.config.clone();
    config.validate().map_err(|e| Error::ModelFormat(format!("embedded config: {e}")))?;
    let by_role = |role: TensorRole| desc.tensors.iter().filter(move |t| t.role == role);

    // Rebuild the visual layers to get their parameter layout, then overwrite values.
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let visual = VisualPathway::new(config.visual_config(desc.visual_dim), &mut store, &mut rng)?;
    let built = store.len();
    for (i, e) in by_role(TensorRole::Param).enumerate() {
        let value = read_tensor(payload, e)?;
        if i < built {
            let p = store.get_mut(ParamId(i));
            if p.name != e.name || p.value.shape() != value.shape() {
                return Err(Error::ModelFormat(format!(
                    "parameter {i}: expected `{}` {:?}, found `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    e.name,
                    value.shape()
                )));
            }
            *p = Parameter::new(e.name.clone(), value);
        } else {
            store.add(e.name.clone(), value);
        }
    }
    let fixed = by_role(TensorRole::FixedAdjacency)
        .next()
        .map(|e| read_tensor(payload, e))
        .transpose()?;
    let spec = config.graph_spec();
    if spec.kind != desc.graph_kind {
        return Err(Error::ModelFormat(format!(
            "descriptor graph kind {} disagrees with its config ({})",
            desc.graph_kind, spec.kind
        )));
    }
    let linguistic = LinguisticPathway::from_parts(
        spec,
        config.model.gcn_dims.clone(),
        config.model.leaky_slope,
        &store,
        config.model.dense_bias,
        fixed,
    )?;

    let firsts: Vec<&TensorEntry> = by_role(TensorRole::AdamFirst).collect();
    let seconds: Vec<&TensorEntry> = by_role(TensorRole::AdamSecond).collect();
    if firsts.len() != store.len() || seconds.len() != store.len() || desc.adam_steps.len() != store.len() {
        return Err(Error::ModelFormat(format!(
            "{} parameters but {}/{} moment tensors and {} step counts",
            store.len(),
            firsts.len(),
            seconds.len(),
            desc.adam_steps.len()
        )));
    }
    let mut adam = Vec::with_capacity(store.len());
    for (k, p) in store.iter().enumerate() {
        let m = read_tensor(payload, firsts[k])?;
        let v = read_tensor(payload, seconds[k])?;
        if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::ModelFormat(format!("moment shapes of `{}` do not match", p.name)));
        }
        adam.push(AdamState {
            first_moment: m,
            second_moment: v,
            step_count: desc.adam_steps[k],
        });
    }
    let dims = ModelDims {
        visual_dim: desc.visual_dim,
        embed_dim: desc.embed_dim,
        attribute_count: desc.attribute_count,
        object_count: desc.object_count,
    };
    if let Some(w) = store.by_name("gcn.0.weight").or_else(|| store.by_name("linguistic.0.weight")) {
        if w.value.rows() != dims.embed_dim {
            return Err(Error::ModelFormat(format!(
                "first linguistic layer takes {} inputs, descriptor says embed_dim {}",
                w.value.rows(),
                dims.embed_dim
            )));
        }
    }
    Ok(ModelState::from_parts(config, dims, store, adam, visual, linguistic))
}
