use super::composite::{frozen_forward, frozen_layer_apply};
use super::inverse::{invert_batchnorm, invert_conv, invert_leakyrelu, invert_maxpool, invert_relu, ConvInverse};
use super::retention::RetentionSet;
use crate::error::{Error, Result};
use crate::model::{leaky_relu_forward, ForwardTrace, LayerKind, LayerRecord, LayerSpec, ModelGraph};
use crate::par::Exec;
use crate::tensor::Tensor;

/// Per-layer record of how the layer was inverted.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDiagnostics {
    /// Zero-based layer index.
    pub layer: usize,
    pub kind: LayerKind,
    pub conv: Option<ConvInverse>,
    /// Batch-norm channels whose scale was clamped away from zero.
    pub clamped_channels: Vec<usize>,
}

impl LayerDiagnostics {
    fn plain(layer: usize, kind: LayerKind) -> Self {
        LayerDiagnostics {
            layer,
            kind,
            conv: None,
            clamped_channels: Vec::new(),
        }
    }

    /// True when the reconstruction is approximate (minimum-norm solve or an
    /// unreachable neuron count).
    pub fn fallback(&self) -> bool {
        self.conv.as_ref().is_some_and(|c| c.unreachable || c.solve.fallback())
    }

    pub fn residual(&self) -> f64 {
        self.conv.as_ref().map_or(0.0, |c| c.solve.residual)
    }
}

/// Back-propagated feature maps, one per boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct BpfmStack {
    /// `maps[b]` is shaped like `activations[b]`; `maps[N]` is the traced
    /// backbone output.
    pub maps: Vec<Tensor>,
    pub diagnostics: Vec<LayerDiagnostics>,
}

/// Runs the backward cascade from the backbone output down to the input.
pub fn backprop_feature_maps(model: &ModelGraph, trace: &ForwardTrace, exec: Exec) -> Result<BpfmStack> {
    let n = model.num_layers();
    let shapes = model.boundary_shapes();
    let mut maps: Vec<Option<Tensor>> = vec![None; n + 1];
    maps[n] = Some(trace.backbone_output().clone());
    let mut diagnostics = Vec::with_capacity(n);

    for layer in (0..n).rev() {
        let spec = &model.layers()[layer];
        let mut diag = LayerDiagnostics::plain(layer, spec.kind());
        let result = (|| -> Result<Tensor> {
            let y = maps[layer + 1].as_ref().expect("filled top-down");
            Ok(match (spec, &trace.records[layer]) {
                (LayerSpec::Conv2d(_), _) => {
                    let (x, info) = invert_conv(model, trace, layer, &maps, exec)?;
                    diag.conv = Some(info);
                    x
                }
                (LayerSpec::BatchNorm2d(bn), _) => {
                    let (x, clamped) = invert_batchnorm(bn, y)?;
                    diag.clamped_channels = clamped;
                    x
                }
                (LayerSpec::Relu, _) => invert_relu(y),
                (LayerSpec::LeakyRelu { negative_slope }, _) => invert_leakyrelu(*negative_slope, y),
                (LayerSpec::MaxPool2d(_), LayerRecord::PoolIndices(idx)) => invert_maxpool(idx, y, &shapes[layer])?,
                (LayerSpec::MaxPool2d(_), _) => {
                    return Err(Error::ShapeMismatch("max-pool layer has no stored indices".into()))
                }
            })
        })();
        let x = result.map_err(|e| e.at_layer(layer + 1))?;
        x.ensure_finite("back-propagated feature map")
            .map_err(|e| e.at_layer(layer + 1))?;
        maps[layer] = Some(x);
        diagnostics.push(diag);
    }
    diagnostics.reverse();
    Ok(BpfmStack {
        maps: maps.into_iter().map(|m| m.expect("every boundary filled")).collect(),
        diagnostics,
    })
}

/// Result of pushing one back-propagated map forward again.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundTrip {
    pub layer: usize,
    pub kind: LayerKind,
    /// Neurons compared.
    pub checked: usize,
    /// `max |forward(x)_k − y_k|` over compared neurons, divided by
    /// `max(1, max |y_k|)`.
    pub max_relative_error: f64,
}

/// Forwards `maps[layer]` through the layer and compares with the deeper map.
///
/// ReLU and max pooling use the traced pattern; LeakyReLU, batch norm and
/// convolution are applied as-is. Only retained neurons are compared (for a
/// ReLU, those whose traced input was non-negative); for a
/// convolution additionally only the equations its solve enforced, and for a
/// multi-layer composite the comparison happens at the composite output.
/// Clamped batch-norm channels are skipped.
pub fn layer_round_trip(
    model: &ModelGraph,
    trace: &ForwardTrace,
    stack: &BpfmStack,
    retention: &RetentionSet,
    layer: usize,
    exec: Exec,
) -> RoundTrip {
    let spec = &model.layers()[layer];
    let diag = &stack.diagnostics[layer];
    let x = stack.maps[layer].data();
    let (forwarded, target, candidates): (Vec<f64>, usize, Vec<usize>) = match spec {
        LayerSpec::Conv2d(_) => {
            let info = diag.conv.as_ref().expect("conv diagnostics");
            let to = layer + info.depth;
            (
                frozen_forward(model, trace, layer, to, x, true, exec),
                to,
                info.solve.rows_selected.clone(),
            )
        }
        LayerSpec::LeakyRelu { negative_slope } => {
            let (y, _) = leaky_relu_forward(*negative_slope, &stack.maps[layer]);
            (y.into_data(), layer + 1, (0..stack.maps[layer + 1].numel()).collect())
        }
        LayerSpec::BatchNorm2d(_) => {
            let (_, h, w) = stack.maps[layer].shape().as_chw().expect("feature map");
            let hw = h * w;
            let keep = (0..stack.maps[layer + 1].numel())
                .filter(|k| !diag.clamped_channels.contains(&(k / hw)))
                .collect();
            (frozen_layer_apply(model, trace, layer, x, true, exec), layer + 1, keep)
        }
        LayerSpec::Relu => {
            let LayerRecord::Mask(mask) = &trace.records[layer] else {
                panic!("relu without a traced mask")
            };
            let keep = (0..mask.len()).filter(|&k| mask[k]).collect();
            (frozen_layer_apply(model, trace, layer, x, true, exec), layer + 1, keep)
        }
        _ => (
            frozen_layer_apply(model, trace, layer, x, true, exec),
            layer + 1,
            (0..stack.maps[layer + 1].numel()).collect(),
        ),
    };
    let y = stack.maps[target].data();
    let mask = &retention.masks[target];
    let compared: Vec<usize> = candidates.into_iter().filter(|&k| mask[k]).collect();
    let scale = compared.iter().fold(1.0f64, |m, &k| m.max(y[k].abs()));
    let err = compared.iter().fold(0.0f64, |m, &k| m.max((forwarded[k] - y[k]).abs()));
    RoundTrip {
        layer,
        kind: spec.kind(),
        checked: compared.len(),
        max_relative_error: err / scale,
    }
}
