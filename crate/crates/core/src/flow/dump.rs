use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttentionFlowResult, SeedKind};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAPS_INDEX: &str = "maps.json";
pub const MAPS_BLOB: &str = "maps.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SeedInfo {
    Class { class: usize },
    Similarity { cosine: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSlot {
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub layer: usize,
    pub kind: String,
    pub raw: MapSlot,
    pub normalized: MapSlot,
    pub fallback: bool,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapsIndex {
    pub model: String,
    pub seed: SeedInfo,
    pub input_height: usize,
    pub input_width: usize,
    pub blob: String,
    pub layers: Vec<MapEntry>,
}

fn push(blob: &mut Vec<u8>, t: &Tensor) -> MapSlot {
    let slot = MapSlot {
        shape: t.shape().dims().to_vec(),
        offset: blob.len(),
    };
    for &v in t.data() {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    slot
}

/// Serialises raw and normalised maps as a JSON index plus an f32 blob.
pub fn write_maps(flow: &AttentionFlowResult, dir: &Path) -> Result<MapsIndex> {
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(flow.maps.len());
    for (m, d) in flow.maps.iter().zip(&flow.diagnostics) {
        layers.push(MapEntry {
            layer: m.layer,
            kind: m.kind.name().to_string(),
            raw: push(&mut blob, &m.raw),
            normalized: push(&mut blob, &m.normalized),
            fallback: d.fallback(),
            residual: d.residual(),
        });
    }
    let (input_height, input_width) = flow
        .maps
        .first()
        .map(|m| (m.normalized.shape().dims()[0], m.normalized.shape().dims()[1]))
        .unwrap_or((0, 0));
    let index = MapsIndex {
        model: flow.model_name.clone(),
        seed: match flow.seed {
            SeedKind::Class(class) => SeedInfo::Class { class },
            SeedKind::Similarity { cosine } => SeedInfo::Similarity { cosine },
        },
        input_height,
        input_width,
        blob: MAPS_BLOB.into(),
        layers,
    };
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::Format(e.to_string()))?;
    let blob_path = dir.join(MAPS_BLOB);
    fs::write(&blob_path, blob).map_err(|e| Error::io(blob_path, e))?;
    let index_path = dir.join(MAPS_INDEX);
    fs::write(&index_path, json).map_err(|e| Error::io(index_path, e))?;
    Ok(index)
}

fn slice(blob: &[u8], slot: &MapSlot) -> Result<Tensor> {
    let shape = Shape::new(slot.shape.clone())?;
    let end = slot.offset + shape.numel() * 4;
    let bytes = blob
        .get(slot.offset..end)
        .ok_or_else(|| Error::Format(format!("map at offset {} runs past the blob", slot.offset)))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

/// Reads a dump back as `(index, [(raw, normalized)])`.
pub fn read_maps(dir: &Path) -> Result<(MapsIndex, Vec<(Tensor, Tensor)>)> {
    let index_path = dir.join(MAPS_INDEX);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: MapsIndex = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let blob_path = dir.join(&index.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let maps = index
        .layers
        .iter()
        .map(|e| Ok((slice(&blob, &e.raw)?, slice(&blob, &e.normalized)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, maps))
}
