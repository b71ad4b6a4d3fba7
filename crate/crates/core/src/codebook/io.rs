//! Binary feature files and codebook persistence.
//!
//! A feature file is little-endian: the magic `FEAT`, `u32` rows, `u32` dim,
//! then `rows * dim` `f32` values. Codebook centroids use the same layout;
//! the remaining codebook fields live in a JSON sidecar next to it.

use std::path::{Path, PathBuf};

use super::{Codebook, CodebookMeta, FeatureMatrix};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FEAT";

pub fn encode_features(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + m.values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.dim as u32).to_le_bytes());
    for v in &m.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::invalid("not a FEAT feature file"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != rows * dim * 4 {
        return Err(Error::invalid(format!(
            "feature file declares {rows}x{dim} but holds {} bytes of data",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(rows, dim, values)
}

pub fn write_features(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_features(m)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::invalid(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Path of the JSON sidecar for a codebook centroid file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Sidecar {
    k: usize,
    dim: usize,
    counts: Vec<u64>,
    meta: CodebookMeta,
}

pub fn save_codebook(path: impl AsRef<Path>, cb: &Codebook) -> Result<()> {
    let path = path.as_ref();
    let centroids = FeatureMatrix::new(cb.k, cb.dim, cb.centroids.clone())?;
    write_features(path, &centroids)?;
    let sidecar = Sidecar {
        k: cb.k,
        dim: cb.dim,
        counts: cb.counts.clone(),
        meta: cb.meta.clone(),
    };
    let side = sidecar_path(path);
    let mut json = serde_json::to_string_pretty(&sidecar)?;
    json.push('\n');
    std::fs::write(&side, json).map_err(|e| Error::io(side, e))
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let path = path.as_ref();
    let centroids = read_features(path)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    if sidecar.k != centroids.rows || sidecar.dim != centroids.dim {
        return Err(Error::invalid("codebook sidecar disagrees with centroid file shape"));
    }
    Ok(Codebook {
        k: sidecar.k,
        dim: sidecar.dim,
        centroids: centroids.values,
        counts: sidecar.counts,
        meta: sidecar.meta,
    })
}
