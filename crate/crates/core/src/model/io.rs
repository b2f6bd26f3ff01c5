//! Portable model format: `manifest.json` plus a little-endian `f32` blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BatchNorm2d, Conv2d, HeadSpec, LayerSpec, MaxPool2d, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, Shape, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    name: String,
    input_shape: [usize; 3],
    layers: Vec<LayerEntry>,
    head: HeadEntry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRef {
    offset: u64,
    shape: Vec<usize>,
}

type TensorTable = BTreeMap<String, TensorRef>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum LayerEntry {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        padding_mode: Option<String>,
        tensors: TensorTable,
    },
    BatchNorm2d {
        num_features: usize,
        eps: f64,
        tensors: TensorTable,
    },
    Relu,
    LeakyRelu {
        negative_slope: f64,
    },
    MaxPool2d {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum HeadEntry {
    Classifier {
        #[serde(default = "global_average")]
        pooling: String,
        num_classes: usize,
        tensors: TensorTable,
    },
    Embedding {
        #[serde(default = "global_average")]
        pooling: String,
        l2_normalize: bool,
    },
}

fn global_average() -> String {
    "global_average".to_string()
}

struct Blob<'a> {
    bytes: &'a [u8],
}

impl Blob<'_> {
    fn read(&self, table: &TensorTable, name: &str, expected: &[usize], owner: &str) -> Result<Vec<f64>> {
        let r = table
            .get(name)
            .ok_or_else(|| Error::Format(format!("{owner}: missing tensor \"{name}\"")))?;
        if r.shape != expected {
            return Err(Error::Shape(format!(
                "{owner}: tensor \"{name}\" has shape {:?}, expected {expected:?}",
                r.shape
            )));
        }
        if r.offset % 4 != 0 {
            return Err(Error::Format(format!(
                "{owner}: tensor \"{name}\" offset {} is not 4-byte aligned",
                r.offset
            )));
        }
        let count: usize = r.shape.iter().product();
        let start = usize::try_from(r.offset).map_err(|_| Error::Format(format!("{owner}: offset overflow")))?;
        let end = count
            .checked_mul(4)
            .and_then(|n| n.checked_add(start))
            .ok_or_else(|| Error::Format(format!("{owner}: tensor \"{name}\" extent overflows")))?;
        if end > self.bytes.len() {
            return Err(Error::Format(format!(
                "{owner}: tensor \"{name}\" spans bytes {start}..{end} but {WEIGHTS_FILE} has {} bytes",
                self.bytes.len()
            )));
        }
        let values: Vec<f64> = self.bytes[start..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "{owner}: tensor \"{name}\" holds non-finite values"
            )));
        }
        Ok(values)
    }
}

/// Loads and validates a model directory.
pub fn load_model(dir: &Path) -> Result<ModelGraph> {
    if !dir.is_dir() {
        return Err(Error::Format(format!(
            "model directory {} does not exist",
            dir.display()
        )));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let blob = Blob { bytes: &bytes };

    let [c, h, w] = manifest.input_shape;
    let input_shape = Shape::chw(c, h, w)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, entry) in manifest.layers.iter().enumerate() {
        let owner = format!("layer {}", i + 1);
        layers.push(layer_from_entry(entry, &blob, &owner)?);
    }
    let head = match &manifest.head {
        HeadEntry::Classifier {
            pooling,
            num_classes,
            tensors,
        } => {
            check_pooling(pooling)?;
            let channels = last_channels(&layers, &input_shape)?;
            let weight = blob.read(tensors, "weight", &[*num_classes, channels], "head")?;
            let bias = blob.read(tensors, "bias", &[*num_classes], "head")?;
            HeadSpec::Classifier {
                weight: DenseMatrix::from_vec(*num_classes, channels, weight)?,
                bias,
            }
        }
        HeadEntry::Embedding { pooling, l2_normalize } => {
            check_pooling(pooling)?;
            HeadSpec::Embedding {
                l2_normalize: *l2_normalize,
            }
        }
    };
    ModelGraph::new(manifest.name, input_shape, layers, head)
}

fn check_pooling(pooling: &str) -> Result<()> {
    if pooling == "global_average" {
        Ok(())
    } else {
        Err(Error::Format(format!("unsupported head pooling \"{pooling}\"")))
    }
}

fn last_channels(layers: &[LayerSpec], input: &Shape) -> Result<usize> {
    let mut shape = input.clone();
    for (i, l) in layers.iter().enumerate() {
        shape = l.output_shape(&shape).map_err(|e| e.at_layer(i + 1))?;
    }
    Ok(shape.as_chw()?.0)
}

fn layer_from_entry(entry: &LayerEntry, blob: &Blob<'_>, owner: &str) -> Result<LayerSpec> {
    Ok(match entry {
        LayerEntry::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            padding_mode,
            tensors,
        } => {
            if let Some(mode) = padding_mode {
                if mode != "zeros" {
                    return Err(Error::Format(format!("{owner}: unsupported padding_mode \"{mode}\"")));
                }
            }
            let wshape = [*out_channels, *in_channels, kernel[0], kernel[1]];
            let weight = blob.read(tensors, "weight", &wshape, owner)?;
            let bias = blob.read(tensors, "bias", &[*out_channels], owner)?;
            LayerSpec::Conv2d(Conv2d {
                in_channels: *in_channels,
                out_channels: *out_channels,
                kernel: (kernel[0], kernel[1]),
                stride: (stride[0], stride[1]),
                padding: (padding[0], padding[1]),
                weight: Tensor::new(Shape::new(wshape.to_vec())?, weight)?,
                bias,
            })
        }
        LayerEntry::BatchNorm2d {
            num_features,
            eps,
            tensors,
        } => {
            let n = [*num_features];
            LayerSpec::BatchNorm2d(BatchNorm2d {
                scale: blob.read(tensors, "weight", &n, owner)?,
                shift: blob.read(tensors, "bias", &n, owner)?,
                running_mean: blob.read(tensors, "running_mean", &n, owner)?,
                running_var: blob.read(tensors, "running_var", &n, owner)?,
                eps: *eps,
            })
        }
        LayerEntry::Relu => LayerSpec::Relu,
        LayerEntry::LeakyRelu { negative_slope } => LayerSpec::LeakyRelu {
            negative_slope: *negative_slope,
        },
        LayerEntry::MaxPool2d { kernel, stride } => LayerSpec::MaxPool2d(MaxPool2d {
            kernel: (kernel[0], kernel[1]),
            stride: (stride[0], stride[1]),
        }),
    })
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, table: &mut TensorTable, name: &str, shape: Vec<usize>, values: &[f64]) {
        table.insert(
            name.to_string(),
            TensorRef {
                offset: self.bytes.len() as u64,
                shape,
            },
        );
        for &v in values {
            self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

/// Writes `manifest.json` and `weights.bin` into `dir` (created if missing).
/// Parameters are rounded to `f32`.
pub fn save_model(model: &ModelGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = BlobWriter { bytes: Vec::new() };
    let mut layers = Vec::with_capacity(model.num_layers());
    for layer in model.layers() {
        layers.push(match layer {
            LayerSpec::Conv2d(conv) => {
                let mut tensors = TensorTable::new();
                blob.push(
                    &mut tensors,
                    "weight",
                    conv.weight.shape().dims().to_vec(),
                    conv.weight.data(),
                );
                blob.push(&mut tensors, "bias", vec![conv.out_channels], &conv.bias);
                LayerEntry::Conv2d {
                    in_channels: conv.in_channels,
                    out_channels: conv.out_channels,
                    kernel: [conv.kernel.0, conv.kernel.1],
                    stride: [conv.stride.0, conv.stride.1],
                    padding: [conv.padding.0, conv.padding.1],
                    padding_mode: None,
                    tensors,
                }
            }
            LayerSpec::BatchNorm2d(bn) => {
                let mut tensors = TensorTable::new();
                let n = vec![bn.channels()];
                blob.push(&mut tensors, "weight", n.clone(), &bn.scale);
                blob.push(&mut tensors, "bias", n.clone(), &bn.shift);
                blob.push(&mut tensors, "running_mean", n.clone(), &bn.running_mean);
                blob.push(&mut tensors, "running_var", n, &bn.running_var);
                LayerEntry::BatchNorm2d {
                    num_features: bn.channels(),
                    eps: bn.eps,
                    tensors,
                }
            }
            LayerSpec::Relu => LayerEntry::Relu,
            LayerSpec::LeakyRelu { negative_slope } => LayerEntry::LeakyRelu {
                negative_slope: *negative_slope,
            },
            LayerSpec::MaxPool2d(pool) => LayerEntry::MaxPool2d {
                kernel: [pool.kernel.0, pool.kernel.1],
                stride: [pool.stride.0, pool.stride.1],
            },
        });
    }
    let head = match model.head() {
        HeadSpec::Classifier { weight, bias } => {
            let mut tensors = TensorTable::new();
            blob.push(
                &mut tensors,
                "weight",
                vec![weight.rows(), weight.cols()],
                weight.data(),
            );
            blob.push(&mut tensors, "bias", vec![bias.len()], bias);
            HeadEntry::Classifier {
                pooling: global_average(),
                num_classes: weight.rows(),
                tensors,
            }
        }
        HeadSpec::Embedding { l2_normalize } => HeadEntry::Embedding {
            pooling: global_average(),
            l2_normalize: *l2_normalize,
        },
    };
    let (c, h, w) = model.input_shape().as_chw()?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: model.name().to_string(),
        input_shape: [c, h, w],
        layers,
        head,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, &blob.bytes).map_err(|e| Error::io(&wpath, e))?;
    Ok(())
}
