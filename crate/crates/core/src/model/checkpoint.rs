//! Checkpoint container.
//!
//! ```text
//! magic      8 bytes   "BICOCKPT"
//! version    u32 LE
//! manifest   u64 LE length, then UTF-8 JSON:
//!            {"format_version", "config", "tensors": [{"name", "shape", "offset", "len"}]}
//! payload    every parameter as little-endian f32, in manifest order
//! checksum   32 bytes, SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, TransformerModel};
use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BICOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_bytes<F: Real>(model: &TransformerModel<F>) -> Vec<u8> {
    let mut offset = 0;
    let tensors = model
        .names()
        .iter()
        .zip(model.params())
        .map(|(name, p)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: p.shape().to_vec(),
                offset,
                len: p.len(),
            };
            offset += p.len();
            e
        })
        .collect();
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        tensors,
    };
    let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");

    let mut out = Vec::with_capacity(8 + 4 + 8 + manifest.len() + offset * 4 + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&(v.to_f64().unwrap() as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Hex SHA-256 trailer of the serialized checkpoint.
pub fn checkpoint_checksum<F: Real>(model: &TransformerModel<F>) -> String {
    let bytes = checkpoint_bytes(model);
    hex::encode(&bytes[bytes.len() - 32..])
}

/// Writes the checkpoint and returns its checksum.
pub fn save_checkpoint<F: Real>(model: &TransformerModel<F>, path: &Path) -> Result<String> {
    let bytes = checkpoint_bytes(model);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(&bytes[bytes.len() - 32..]))
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

pub fn parse_checkpoint<F: Real>(bytes: &[u8]) -> Result<TransformerModel<F>> {
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut at = 0;
    if take(body, &mut at, 8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(body, &mut at, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(take(body, &mut at, 8)?.try_into().unwrap()) as usize;
    let manifest: Manifest = serde_json::from_slice(take(body, &mut at, mlen)?)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let payload = &body[at..];
    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if payload.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, manifest describes {}",
            payload.len(),
            total * 4
        )));
    }
    let mut params = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let raw = &payload[entry.offset * 4..(entry.offset + entry.len) * 4];
        let data = raw
            .chunks_exact(4)
            .map(|c| F::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        params.push(
            Tensor::from_vec(&entry.shape, data)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?,
        );
    }
    let model = TransformerModel::from_parts(manifest.config, params)?;
    for (entry, name) in manifest.tensors.iter().zip(model.names()) {
        if &entry.name != name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: found {}, expected {name}",
                entry.name
            )));
        }
    }
    Ok(model)
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<TransformerModel<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
