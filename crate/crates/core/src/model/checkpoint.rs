//! Checkpoint files: `b"PWCK"`, a little-endian u32 format version, a u32
//! manifest length, the JSON manifest, then every tensor as little-endian f32
//! in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::scalar::Scalar;
use super::weights::DecoderWeights;
use crate::error::{Error, Result};
use crate::tokenizer::vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the tensor data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Scalar>(w: &DecoderWeights<T>) -> Result<Vec<u8>> {
    let tensors = w
        .layout()
        .tensors
        .iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            offset: t.offset * 4,
        })
        .collect();
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        config: w.config().clone(),
        vocabulary: vocabulary(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(12 + json.len() + w.num_params() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in w.params() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub(crate) fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("truncated at byte {at}")))
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<DecoderWeights<T>> {
    if bytes.get(..4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(bytes, 8)? as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Format("truncated manifest".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(json)?;
    if manifest.vocabulary != vocabulary() {
        return Err(Error::Mismatch("checkpoint vocabulary differs from this build".into()));
    }
    let data = &bytes[12 + len..];
    let mut w = DecoderWeights::<T>::zeros(manifest.config.clone())?;
    let expected: Vec<(String, Vec<usize>, usize)> = w
        .layout()
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone(), t.offset * 4))
        .collect();
    let listed: Vec<(String, Vec<usize>, usize)> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone(), t.offset))
        .collect();
    if expected != listed || manifest.tensors.iter().any(|t| t.dtype != "f32") {
        return Err(Error::Mismatch("tensor directory does not match the configured layout".into()));
    }
    if data.len() != w.num_params() * 4 {
        return Err(Error::Format(format!(
            "expected {} bytes of tensor data, found {}",
            w.num_params() * 4,
            data.len()
        )));
    }
    for (p, chunk) in w.params_mut().iter_mut().zip(data.chunks_exact(4)) {
        *p = T::of(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok(w)
}

pub fn save<T: Scalar>(w: &DecoderWeights<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(w)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<DecoderWeights<T>> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and checks it matches `expected`.
pub fn load_matching<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<DecoderWeights<T>> {
    let w = load::<T>(path)?;
    if w.config() != expected {
        return Err(Error::Mismatch(format!(
            "checkpoint config {:?} differs from requested {:?}",
            w.config(),
            expected
        )));
    }
    Ok(w)
}
