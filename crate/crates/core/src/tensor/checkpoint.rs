//! Single-file checkpoint: `u64` little-endian manifest length, a JSON
//! manifest (metadata plus tensor names, shapes and offsets), then the
//! concatenated little-endian `f32` payload.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    metadata: serde_json::Value,
    tensors: Vec<ManifestTensor>,
}

pub fn write_checkpoint(
    path: &Path,
    metadata: &serde_json::Value,
    entries: &[CheckpointEntry],
) -> Result<(), CheckpointError> {
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(CheckpointError::Malformed(format!(
                "tensor {} has shape {:?} but {} values",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        tensors.push(ManifestTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset,
        });
        offset += e.data.len();
    }
    let manifest = serde_json::to_vec(&Manifest {
        metadata: metadata.clone(),
        tensors,
    })?;
    let mut bytes = Vec::with_capacity(8 + manifest.len() + 4 * offset);
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest);
    for e in entries {
        for v in &e.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(
    path: &Path,
) -> Result<(serde_json::Value, Vec<CheckpointEntry>), CheckpointError> {
    let bytes = fs::read(path)?;
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| CheckpointError::Malformed("truncated header".into()))?;
    let mlen = u64::from_le_bytes(header) as usize;
    let manifest_bytes = bytes
        .get(8..8usize.saturating_add(mlen))
        .ok_or_else(|| CheckpointError::Malformed("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)?;
    let payload = &bytes[8 + mlen..];
    if payload.len() % 4 != 0 {
        return Err(CheckpointError::Malformed("payload not a multiple of 4 bytes".into()));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut entries = Vec::with_capacity(manifest.tensors.len());
    for t in manifest.tensors {
        let n: usize = t.shape.iter().product();
        let data = values
            .get(t.offset..t.offset + n)
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {} out of bounds", t.name)))?
            .to_vec();
        entries.push(CheckpointEntry {
            name: t.name,
            shape: t.shape,
            data,
        });
    }
    Ok((manifest.metadata, entries))
}
