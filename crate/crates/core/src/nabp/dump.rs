use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cascade::BpfmStack;
use crate::error::{Error, Result};

pub const BPFM_INDEX: &str = "bpfm.json";
pub const BPFM_BLOB: &str = "bpfm.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpfmEntry {
    /// Boundary index; 0 is the input.
    pub boundary: usize,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// One-based layer that produced this map, absent for the backbone output.
    pub layer: Option<usize>,
    pub fallback: bool,
    pub residual: f64,
    pub clamped_channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpfmIndex {
    pub blob: String,
    pub maps: Vec<BpfmEntry>,
}

/// Writes every back-propagated map as little-endian f32 plus a JSON index.
pub fn dump_bpfm(stack: &BpfmStack, dir: &Path) -> Result<BpfmIndex> {
    let mut blob = Vec::new();
    let mut maps = Vec::with_capacity(stack.maps.len());
    for (b, map) in stack.maps.iter().enumerate() {
        let diag = stack.diagnostics.get(b);
        maps.push(BpfmEntry {
            boundary: b,
            shape: map.shape().dims().to_vec(),
            offset: blob.len(),
            layer: diag.map(|d| d.layer + 1),
            fallback: diag.is_some_and(|d| d.fallback()),
            residual: diag.map_or(0.0, |d| d.residual()),
            clamped_channels: diag.map(|d| d.clamped_channels.clone()).unwrap_or_default(),
        });
        for &v in map.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let index = BpfmIndex {
        blob: BPFM_BLOB.into(),
        maps,
    };
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::Format(e.to_string()))?;
    let blob_path = dir.join(BPFM_BLOB);
    fs::write(&blob_path, blob).map_err(|e| Error::io(blob_path, e))?;
    let index_path = dir.join(BPFM_INDEX);
    fs::write(&index_path, json).map_err(|e| Error::io(index_path, e))?;
    Ok(index)
}
