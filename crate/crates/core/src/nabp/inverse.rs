use super::composite::{compose_frozen_affine, compose_range};
use super::jacobian::assemble_conv_jacobian;
use super::solve::{invert_affine_square, SolveDiagnostics};
use crate::error::{Error, Result};
use crate::model::{BatchNorm2d, ForwardTrace, LayerSpec, ModelGraph};
use crate::par::Exec;
use crate::tensor::{Shape, Tensor};

/// BN scales below this magnitude are replaced by `±MIN_BN_SCALE`.
pub const MIN_BN_SCALE: f64 = 1e-12;

/// Inverse batch norm, `x = √(var + eps)/scale · (y − shift) + mean`.
///
/// Returns the channels whose scale had to be clamped away from zero.
pub fn invert_batchnorm(bn: &BatchNorm2d, bpfm: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = bpfm.shape().as_chw()?;
    if c != bn.channels() {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm2d has {} channels, map has {c}",
            bn.channels()
        )));
    }
    let mut clamped = Vec::new();
    let scales: Vec<f64> = bn
        .scale
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            if s.abs() < MIN_BN_SCALE {
                clamped.push(k);
                if s < 0.0 {
                    -MIN_BN_SCALE
                } else {
                    MIN_BN_SCALE
                }
            } else {
                s
            }
        })
        .collect();
    let hw = h * w;
    let data = bpfm
        .data()
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let k = i / hw;
            bn.std(k) / scales[k] * (y - bn.shift[k]) + bn.running_mean[k]
        })
        .collect();
    Ok((Tensor::new(bpfm.shape().clone(), data)?, clamped))
}

/// Values pass through; negative pre-activations were already abandoned.
pub fn invert_relu(bpfm: &Tensor) -> Tensor {
    bpfm.clone()
}

pub fn invert_leakyrelu(negative_slope: f64, bpfm: &Tensor) -> Tensor {
    bpfm.map(|y| if y >= 0.0 { y } else { y / negative_slope })
}

/// Scatters each pooled value back to its stored source position; every
/// other input position is zero.
pub fn invert_maxpool(indices: &[usize], bpfm: &Tensor, in_shape: &Shape) -> Result<Tensor> {
    if indices.len() != bpfm.numel() {
        return Err(Error::ShapeMismatch(format!(
            "{} pool indices for a map of {} values",
            indices.len(),
            bpfm.numel()
        )));
    }
    let mut out = Tensor::zeros(in_shape.clone());
    let len = out.numel();
    for (&i, &y) in indices.iter().zip(bpfm.data()) {
        if i >= len {
            return Err(Error::IndexOutOfRange { index: i, len });
        }
        out.data_mut()[i] = y;
    }
    Ok(out)
}

/// How a convolution's back-propagated map was obtained.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvInverse {
    pub solve: SolveDiagnostics,
    /// Number of stacked layers in the frozen composite (1 when `q ≥ p`).
    pub depth: usize,
    /// No stack reached `p` outputs; the composite ran to the backbone end.
    pub unreachable: bool,
}

/// Back-propagates through zero-based conv layer `layer`.
///
/// `maps[b]` must hold the back-propagated map of every boundary `b > layer`.
pub fn invert_conv(
    model: &ModelGraph,
    trace: &ForwardTrace,
    layer: usize,
    maps: &[Option<Tensor>],
    exec: Exec,
) -> Result<(Tensor, ConvInverse)> {
    let LayerSpec::Conv2d(conv) = &model.layers()[layer] else {
        return Err(Error::ShapeMismatch(format!(
            "layer {} is not a convolution",
            layer + 1
        )));
    };
    let shapes = model.boundary_shapes();
    let in_shape = &shapes[layer];
    let p = in_shape.numel();
    let q = shapes[layer + 1].numel();
    let deeper = |b: usize| -> Result<&Tensor> {
        maps.get(b)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::ShapeMismatch(format!("back-propagated map for boundary {b} is missing")))
    };

    let (x, info) = if q >= p {
        let jac = assemble_conv_jacobian(conv, in_shape, &shapes[layer + 1], exec);
        let y = deeper(layer + 1)?;
        let (x, solve) = invert_affine_square(&jac.matrix, &jac.bias_vector, y.data(), exec)?;
        (
            x,
            ConvInverse {
                solve,
                depth: 1,
                unreachable: false,
            },
        )
    } else {
        let (composite, unreachable) = match compose_frozen_affine(model, trace, layer, p, exec) {
            Ok(c) => (c, false),
            Err(Error::Unreachable { .. }) => (
                compose_range(model, trace, layer, model.num_layers() - layer, exec),
                true,
            ),
            Err(e) => return Err(e),
        };
        let y = deeper(layer + composite.depth)?;
        let (x, solve) = invert_affine_square(&composite.jacobian, &composite.offset, y.data(), exec)?;
        (
            x,
            ConvInverse {
                solve,
                depth: composite.depth,
                unreachable,
            },
        )
    };
    Ok((Tensor::new(in_shape.clone(), x)?, info))
}
