//! Golden forward-pass traces for cross-implementation checks.
//!
//! `golden.json` indexes `golden.bin`, a little-endian `f32` blob holding the
//! `N + 1` boundary activations (input first) and the head output.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{forward_trace, ModelGraph};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensor::{Shape, Tensor};

pub const GOLDEN_INDEX: &str = "golden.json";
pub const GOLDEN_BLOB: &str = "golden.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GoldenIndex {
    format_version: u32,
    model: String,
    boundaries: Vec<Slot>,
    output: Slot,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Slot {
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoldenTrace {
    pub model: String,
    pub boundaries: Vec<Tensor>,
    pub output: Vec<f64>,
}

impl GoldenTrace {
    pub fn input(&self) -> &Tensor {
        &self.boundaries[0]
    }
}

pub fn save_golden(trace: &GoldenTrace, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let slot = |shape: Vec<usize>, data: &[f64], bytes: &mut Vec<u8>| {
        let s = Slot {
            offset: bytes.len() as u64,
            shape,
        };
        for &v in data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        s
    };
    let boundaries = trace
        .boundaries
        .iter()
        .map(|t| slot(t.shape().dims().to_vec(), t.data(), &mut bytes))
        .collect();
    let output = slot(vec![trace.output.len()], &trace.output, &mut bytes);
    let index = GoldenIndex {
        format_version: 1,
        model: trace.model.clone(),
        boundaries,
        output,
    };
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::Format(e.to_string()))?;
    let ipath = dir.join(GOLDEN_INDEX);
    fs::write(&ipath, text + "\n").map_err(|e| Error::io(&ipath, e))?;
    let bpath = dir.join(GOLDEN_BLOB);
    fs::write(&bpath, bytes).map_err(|e| Error::io(&bpath, e))
}

pub fn load_golden(dir: &Path) -> Result<GoldenTrace> {
    let ipath = dir.join(GOLDEN_INDEX);
    let text = fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let index: GoldenIndex =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", ipath.display())))?;
    if index.format_version != 1 {
        return Err(Error::Format(format!(
            "unsupported golden format_version {}",
            index.format_version
        )));
    }
    let bpath = dir.join(GOLDEN_BLOB);
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let read = |s: &Slot| -> Result<Tensor> {
        let shape = Shape::new(s.shape.clone())?;
        let start = s.offset as usize;
        let end = start
            .checked_add(shape.numel() * 4)
            .filter(|&e| e <= bytes.len() && start.is_multiple_of(4))
            .ok_or_else(|| Error::Format(format!("golden slot at offset {} exceeds {GOLDEN_BLOB}", s.offset)))?;
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Tensor::new(shape, data)
    };
    let boundaries = index.boundaries.iter().map(&read).collect::<Result<Vec<_>>>()?;
    if boundaries.is_empty() {
        return Err(Error::Format("golden trace has no boundaries".into()));
    }
    Ok(GoldenTrace {
        model: index.model,
        boundaries,
        output: read(&index.output)?.into_data(),
    })
}

/// Captures a golden trace from this engine (used for fixtures and tests).
pub fn capture_golden(model: &ModelGraph, input: &Tensor, exec: Exec) -> Result<GoldenTrace> {
    let trace = forward_trace(model, input, exec)?;
    Ok(GoldenTrace {
        model: model.name().to_string(),
        boundaries: trace.activations,
        output: trace.head.output,
    })
}

/// Worst per-boundary error of the engine against a golden trace, each
/// relative to `max(1, max|golden|)` at that boundary.
#[derive(Clone, Debug)]
pub struct GoldenComparison {
    pub boundary_errors: Vec<f64>,
    pub output_error: f64,
}

impl GoldenComparison {
    pub fn worst(&self) -> f64 {
        self.boundary_errors.iter().copied().fold(self.output_error, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst() <= tolerance
    }
}

pub fn compare_golden(model: &ModelGraph, golden: &GoldenTrace, exec: Exec) -> Result<GoldenComparison> {
    if golden.boundaries.len() != model.num_layers() + 1 {
        return Err(Error::Format(format!(
            "golden trace has {} boundaries, model has {} layers",
            golden.boundaries.len(),
            model.num_layers()
        )));
    }
    let trace = forward_trace(model, golden.input(), exec)?;
    let boundary_errors = trace
        .activations
        .iter()
        .zip(&golden.boundaries)
        .map(|(a, g)| {
            a.ensure_same_shape(g)?;
            Ok(relative_error(a.data(), g.data()))
        })
        .collect::<Result<Vec<_>>>()?;
    if trace.head.output.len() != golden.output.len() {
        return Err(Error::ShapeMismatch("golden output length".into()));
    }
    Ok(GoldenComparison {
        boundary_errors,
        output_error: relative_error(&trace.head.output, &golden.output),
    })
}

fn relative_error(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}
