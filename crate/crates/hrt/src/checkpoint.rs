//! Model checkpoint: `HRTCKPT1`, a little-endian `u64` header length, a
//! JSON header, then the tensors listed in the header as little-endian
//! floats in the listed order.

use std::fs;
use std::path::Path;

use hrt_core::model::{HrtModel, ModelConfig, PARAMETER_NAMES};
use hrt_core::semantics::SemanticSpace;
use hrt_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset_io::Dtype;
use crate::error::{HrtError, Result};

pub const MAGIC: &[u8; 8] = b"HRTCKPT1";

const SEMANTIC_NAMES: [&str; 3] = ["semantics.attr_vectors", "semantics.compact_vectors", "semantics.class_attr"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: Dtype,
    pub seed: u64,
    /// Hash of the experiment configuration that produced the model.
    pub config_hash: String,
    pub model_config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Hex SHA-256 of the payload.
    pub payload_sha256: String,
}

fn named_tensors(model: &HrtModel) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = PARAMETER_NAMES.iter().map(|s| s.to_string()).zip(model.parameters()).collect();
    let s = &model.semantics;
    for (name, t) in SEMANTIC_NAMES.iter().zip([s.attr_vectors(), s.compact_vectors(), s.class_attr()]) {
        out.push((name.to_string(), t.clone()));
    }
    out
}

/// Serialises `model` to bytes.
pub fn encode_checkpoint(model: &HrtModel, seed: u64, config_hash: &str, dtype: Dtype) -> Vec<u8> {
    let tensors = named_tensors(model);
    let mut payload = Vec::new();
    for (_, t) in &tensors {
        for &x in t.data() {
            match dtype {
                Dtype::F64 => payload.extend_from_slice(&x.to_le_bytes()),
                Dtype::F32 => payload.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }
    let header = CheckpointHeader {
        version: 1,
        dtype,
        seed,
        config_hash: config_hash.to_string(),
        model_config: model.config,
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(path: &Path, model: &HrtModel, seed: u64, config_hash: &str) -> Result<()> {
    fs::write(path, encode_checkpoint(model, seed, config_hash, Dtype::F64)).map_err(|e| HrtError::io(path, e))
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<(CheckpointHeader, HrtModel)> {
    let bad = |m: String| HrtError::format(path, m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(bad(format!("header length {len} exceeds file size")));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len]).map_err(|e| HrtError::Json { path: path.into(), source: e })?;
    let payload = &body[len..];
    let w = header.dtype.width();
    let count: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != count * w {
        return Err(bad(format!("payload has {} bytes, header declares {}", payload.len(), count * w)));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch".into()));
    }
    let expected: Vec<&str> = PARAMETER_NAMES.iter().chain(SEMANTIC_NAMES.iter()).copied().collect();
    let names: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
    if names != expected {
        return Err(bad(format!("tensor list {names:?}, expected {expected:?}")));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = &payload[offset * w..(offset + n) * w];
        let data: Vec<f64> = match header.dtype {
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
        };
        tensors.push(Tensor::new(e.shape.clone(), data).map_err(|err| bad(format!("tensor {}: {err}", e.name)))?);
        offset += n;
    }
    let sem_tensors = tensors.split_off(PARAMETER_NAMES.len());
    let mut it = sem_tensors.into_iter();
    let mut next = || it.next().expect("name list checked");
    let semantics = SemanticSpace::new(next(), next(), next())?;
    let mut model = HrtModel::init(header.model_config, semantics, 0)?;
    model.set_parameters(&tensors)?;
    Ok((header, model))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, HrtModel)> {
    let bytes = fs::read(path).map_err(|e| HrtError::io(path, e))?;
    decode_checkpoint(path, &bytes)
}
