//! Sequential CNN graphs: layer specifications, the portable on-disk format,
//! traced forward execution and the head's vector–Jacobian product.

mod forward;
pub mod golden;
mod io;
pub mod toy;

pub use forward::{
    apply_layer, batchnorm_forward, conv2d_forward, forward_trace, head_forward, head_vjp, leaky_relu_forward,
    maxpool_forward, predict, relu_forward, ForwardTrace, HeadTrace, LayerRecord, Prediction,
};
pub(crate) use forward::{argmax, conv_apply};
pub use io::{load_model, save_model, MANIFEST_FILE, WEIGHTS_FILE};

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// `(out, in, kh, kw)`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// Inference-mode batch normalisation: `y = scale·(x − mean)/√(var + eps) + shift`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn std(&self, c: usize) -> f64 {
        (self.running_var[c] + self.eps).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxPool2d {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Relu,
    LeakyRelu { negative_slope: f64 },
    MaxPool2d(MaxPool2d),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    BatchNorm2d,
    Relu,
    LeakyRelu,
    MaxPool2d,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::BatchNorm2d => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::LeakyRelu => "leakyrelu",
            LayerKind::MaxPool2d => "maxpool2d",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl serde::Serialize for LayerKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv2d(_) => LayerKind::Conv2d,
            LayerSpec::BatchNorm2d(_) => LayerKind::BatchNorm2d,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::LeakyRelu { .. } => LayerKind::LeakyRelu,
            LayerSpec::MaxPool2d(_) => LayerKind::MaxPool2d,
        }
    }

    /// Output shape for a `D × H × W` input, validating parameter shapes.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        let (c, h, w) = input.as_chw()?;
        match self {
            LayerSpec::Conv2d(conv) => {
                if conv.in_channels != c {
                    return Err(Error::Shape(format!(
                        "conv2d expects {} input channels, got {c}",
                        conv.in_channels
                    )));
                }
                let (kh, kw) = conv.kernel;
                let want = [conv.out_channels, conv.in_channels, kh, kw];
                if conv.weight.shape().dims() != want {
                    return Err(Error::Shape(format!(
                        "conv2d weight has shape {}, expected {want:?}",
                        conv.weight.shape()
                    )));
                }
                if conv.bias.len() != conv.out_channels {
                    return Err(Error::Shape(format!(
                        "conv2d bias has {} entries, expected {}",
                        conv.bias.len(),
                        conv.out_channels
                    )));
                }
                let oh = window_count(h + 2 * conv.padding.0, kh, conv.stride.0)?;
                let ow = window_count(w + 2 * conv.padding.1, kw, conv.stride.1)?;
                Shape::chw(conv.out_channels, oh, ow)
            }
            LayerSpec::BatchNorm2d(bn) => {
                let n = bn.channels();
                if n != c
                    || [&bn.shift, &bn.running_mean, &bn.running_var]
                        .iter()
                        .any(|v| v.len() != n)
                {
                    return Err(Error::Shape(format!(
                        "batchnorm2d parameters do not match {c} channels"
                    )));
                }
                if (0..n).any(|k| !(bn.running_var[k] + bn.eps > 0.0)) {
                    return Err(Error::Shape("batchnorm2d running_var + eps must be positive".into()));
                }
                Ok(input.clone())
            }
            LayerSpec::Relu => Ok(input.clone()),
            LayerSpec::LeakyRelu { negative_slope } => {
                if !(*negative_slope > 0.0) {
                    return Err(Error::Shape(format!(
                        "leakyrelu negative_slope must be positive, got {negative_slope}"
                    )));
                }
                Ok(input.clone())
            }
            LayerSpec::MaxPool2d(pool) => {
                let oh = window_count(h, pool.kernel.0, pool.stride.0)?;
                let ow = window_count(w, pool.kernel.1, pool.stride.1)?;
                Shape::chw(c, oh, ow)
            }
        }
    }
}

/// `⌊(extent − kernel)/stride⌋ + 1` for an already padded extent.
fn window_count(extent: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Shape("kernel and stride extents must be at least 1".into()));
    }
    if extent < kernel {
        return Err(Error::Shape(format!(
            "kernel extent {kernel} exceeds padded input extent {extent}"
        )));
    }
    Ok((extent - kernel) / stride + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadSpec {
    /// Global average pooling followed by a fully connected layer.
    Classifier { weight: DenseMatrix, bias: Vec<f64> },
    /// Global average pooling, optionally L2-normalised.
    Embedding { l2_normalize: bool },
}

impl HeadSpec {
    pub fn output_len(&self, channels: usize) -> usize {
        match self {
            HeadSpec::Classifier { weight, .. } => weight.rows(),
            HeadSpec::Embedding { .. } => channels,
        }
    }
}

/// An ordered backbone `g_1..g_N` plus a head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    name: String,
    input_shape: Shape,
    layers: Vec<LayerSpec>,
    head: HeadSpec,
    boundaries: Vec<Shape>,
}

impl ModelGraph {
    pub fn new(name: impl Into<String>, input_shape: Shape, layers: Vec<LayerSpec>, head: HeadSpec) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a model needs at least one backbone layer".into()));
        }
        input_shape.as_chw()?;
        let mut boundaries = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(boundaries.last().expect("non-empty"))
                .map_err(|e| e.at_layer(i + 1))?;
            boundaries.push(next);
        }
        let (channels, _, _) = boundaries.last().expect("non-empty").as_chw()?;
        if let HeadSpec::Classifier { weight, bias } = &head {
            if weight.cols() != channels || bias.len() != weight.rows() || weight.rows() == 0 {
                return Err(Error::Shape(format!(
                    "classifier is {}×{} with {} biases but the backbone ends with {channels} channels",
                    weight.rows(),
                    weight.cols(),
                    bias.len()
                )));
            }
        }
        Ok(ModelGraph {
            name: name.into(),
            input_shape,
            layers,
            head,
            boundaries,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    pub fn head(&self) -> &HeadSpec {
        &self.head
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Shapes of the activations `A^1..A^{N+1}`; boundary `b` feeds layer `b`
    /// (zero-based) and boundary `b + 1` is its output.
    pub fn boundary_shapes(&self) -> &[Shape] {
        &self.boundaries
    }

    pub fn output_shape(&self) -> &Shape {
        self.boundaries.last().expect("at least one layer")
    }

    pub fn head_output_len(&self) -> usize {
        let (c, _, _) = self.output_shape().as_chw().expect("validated");
        self.head.output_len(c)
    }
}
