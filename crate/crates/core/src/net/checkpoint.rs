//! Checkpoint files.
//!
//! Layout: the magic `DMLMCKPT`, a little-endian `u32` header length, a JSON
//! header (config, layout version, dtype, tensor table, SHA-256 of the data),
//! then every tensor's values little-endian in declared order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams, Real};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DMLMCKPT";
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layout_version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub data_bytes: usize,
    pub checksum: String,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn encode_checkpoint<F: Real>(params: &ModelParams<F>) -> Result<Vec<u8>> {
    let tensors = params.tensors();
    let mut data = Vec::with_capacity(params.num_parameters() * F::BYTES);
    for (_, t) in &tensors {
        for &x in &t.data {
            x.put_le(&mut data);
        }
    }
    let header = CheckpointHeader {
        layout_version: LAYOUT_VERSION,
        dtype: F::DTYPE.to_string(),
        config: params.config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        data_bytes: data.len(),
        checksum: hex_digest(&data),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode_checkpoint<F: Real>(bytes: &[u8]) -> Result<ModelParams<F>> {
    let corrupt = |m: &str| Error::Checksum(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_bytes = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| corrupt("truncated checkpoint header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Checksum(format!("bad header: {e}")))?;
    let data = &bytes[12 + header_len..];
    if data.len() != header.data_bytes {
        return Err(Error::Checksum(format!(
            "checkpoint holds {} data bytes, header declares {}",
            data.len(),
            header.data_bytes
        )));
    }
    if hex_digest(data) != header.checksum {
        return Err(corrupt("checkpoint data does not match its checksum"));
    }
    if header.layout_version != LAYOUT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "layout version {} (expected {LAYOUT_VERSION})",
            header.layout_version
        )));
    }
    if header.dtype != F::DTYPE {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint dtype {} but {} was requested",
            header.dtype,
            F::DTYPE
        )));
    }
    header.config.validate()?;
    let mut params = ModelParams::<F>::zeros(&header.config);
    let mut offset = 0;
    {
        let tensors = params.tensors_mut();
        if tensors.len() != header.tensors.len() {
            return Err(Error::IncompatibleCheckpoint("tensor count mismatch".into()));
        }
        for ((name, t), entry) in tensors.into_iter().zip(&header.tensors) {
            if name != entry.name || t.shape != entry.shape {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor {} {:?} does not match {name} {:?}",
                    entry.name, entry.shape, t.shape
                )));
            }
            for x in t.data.iter_mut() {
                *x = F::get_le(&data[offset..offset + F::BYTES]);
                offset += F::BYTES;
            }
        }
    }
    if offset != data.len() {
        return Err(corrupt("trailing checkpoint data"));
    }
    Ok(params)
}

pub fn save_checkpoint<F: Real>(params: &ModelParams<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; any corruption or truncation is a checksum error.
pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<(ModelParams<F>, ModelConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode_checkpoint(&bytes)?;
    let config = params.config.clone();
    Ok((params, config))
}
