//! Per-layer attention maps from coefficients and back-propagated feature
//! maps, plus rendering and dumping.

mod dump;
mod render;

pub use dump::{read_maps, write_maps, MapEntry, MapSlot, MapsIndex, SeedInfo, MAPS_BLOB, MAPS_INDEX};
pub use render::{colormap, gray_base, montage, render_heatmap, tile_grid, RgbImage, GUTTER};

use crate::attribution::{
    cascade_coefficients, cosine_similarity, seed_class_score, seed_similarity, CoefficientStack, FeatureVector,
    VectorRole,
};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, LayerKind, ModelGraph};
use crate::nabp::{backprop_feature_maps, BpfmStack, LayerDiagnostics};
use crate::par::Exec;
use crate::tensor::{bilinear_upsample, Shape, Tensor};

/// `Σ_d Λ_d ⊙ B_d` over the channel axis, before the clamp.
pub fn layer_attention_unclamped(lambda: &Tensor, bpfm: &Tensor) -> Result<Tensor> {
    if lambda.shape() != bpfm.shape() {
        return Err(Error::ShapeMismatch(format!(
            "coefficients {} vs feature map {}",
            lambda.shape(),
            bpfm.shape()
        )));
    }
    let (c, h, w) = lambda.shape().as_chw()?;
    let hw = h * w;
    let (l, b) = (lambda.data(), bpfm.data());
    let data = (0..hw)
        .map(|i| (0..c).map(|d| l[d * hw + i] * b[d * hw + i]).sum())
        .collect();
    Tensor::new(Shape::new(vec![h, w])?, data)
}

/// `max(Σ_d Λ_d ⊙ B_d, 0)`.
pub fn layer_attention(lambda: &Tensor, bpfm: &Tensor) -> Result<Tensor> {
    Ok(layer_attention_unclamped(lambda, bpfm)?.map(|v| v.max(0.0)))
}

/// Min-max scaling to `[0, 1]`; constant maps become zero.
pub fn normalize_map(raw: &Tensor) -> Tensor {
    let (lo, hi) = raw.min_max();
    if !(hi > lo) {
        return raw.map(|_| 0.0);
    }
    let span = hi - lo;
    raw.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// One-based layer index.
    pub layer: usize,
    pub kind: LayerKind,
    /// `H^l × W^l`, non-negative.
    pub raw: Tensor,
    /// Input resolution, in `[0, 1]`.
    pub normalized: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowSeed {
    Class(usize),
    Support(FeatureVector),
}

#[derive(Clone, Debug, PartialEq)]
pub enum SeedKind {
    Class(usize),
    Similarity { cosine: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionFlowResult {
    pub model_name: String,
    pub seed: SeedKind,
    pub maps: Vec<AttentionMap>,
    pub diagnostics: Vec<LayerDiagnostics>,
    pub bpfm: BpfmStack,
    pub coefficients: CoefficientStack,
}

/// Back-propagates feature maps and coefficients once, then forms one
/// attention map per backbone layer.
pub fn build_flow(
    model: &ModelGraph,
    trace: &ForwardTrace,
    seed: &FlowSeed,
    exec: Exec,
) -> Result<AttentionFlowResult> {
    let (lambda, kind) = match seed {
        FlowSeed::Class(c) => (seed_class_score(model, trace, *c)?, SeedKind::Class(*c)),
        FlowSeed::Support(s) => {
            let seed = seed_similarity(model, trace, s)?;
            let q = FeatureVector::new(trace.output().to_vec(), VectorRole::Query)?;
            (
                seed,
                SeedKind::Similarity {
                    cosine: cosine_similarity(&q, s)?,
                },
            )
        }
    };
    let bpfm = backprop_feature_maps(model, trace, exec)?;
    let coefficients = cascade_coefficients(model, trace, lambda, exec)?;
    let (_, h, w) = model.input_shape().as_chw()?;
    let maps = exec
        .map(model.num_layers(), |l| -> Result<AttentionMap> {
            let raw =
                layer_attention(&coefficients.coefficients[l + 1], &bpfm.maps[l + 1]).map_err(|e| e.at_layer(l + 1))?;
            let normalized = normalize_map(&bilinear_upsample(&raw, h, w)?);
            Ok(AttentionMap {
                layer: l + 1,
                kind: model.layers()[l].kind(),
                raw,
                normalized,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionFlowResult {
        model_name: model.name().to_string(),
        seed: kind,
        maps,
        diagnostics: bpfm.diagnostics.clone(),
        bpfm,
        coefficients,
    })
}
