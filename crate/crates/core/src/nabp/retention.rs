use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Conv2d, ForwardTrace, LayerKind, LayerRecord, LayerSpec, ModelGraph};
use crate::tensor::Shape;

/// Decision-making neurons, one mask per boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionSet {
    pub masks: Vec<Vec<bool>>,
}

impl RetentionSet {
    pub fn count(&self, boundary: usize) -> usize {
        self.masks[boundary].iter().filter(|&&m| m).count()
    }
}

/// Calls `f(input_flat)` for every in-bounds input feeding conv output `out`.
fn for_each_receptive(conv: &Conv2d, in_shape: &Shape, out_shape: &Shape, out: usize, mut f: impl FnMut(usize)) {
    let (cin, h, w) = in_shape.as_chw().expect("validated");
    let (_, oh, ow) = out_shape.as_chw().expect("validated");
    let (oy, ox) = ((out / ow) % oh, out % ow);
    let (kh, kw) = conv.kernel;
    for ci in 0..cin {
        for ky in 0..kh {
            let iy = (oy * conv.stride.0 + ky) as isize - conv.padding.0 as isize;
            if iy < 0 || iy as usize >= h {
                continue;
            }
            for kx in 0..kw {
                let ix = (ox * conv.stride.1 + kx) as isize - conv.padding.1 as isize;
                if ix < 0 || ix as usize >= w {
                    continue;
                }
                f((ci * h + iy as usize) * w + ix as usize);
            }
        }
    }
}

/// Traces decision-making neurons backward from an all-retained output.
pub fn compute_retention(model: &ModelGraph, trace: &ForwardTrace) -> RetentionSet {
    let n = model.num_layers();
    let shapes = model.boundary_shapes();
    let mut masks = vec![Vec::new(); n + 1];
    masks[n] = vec![true; shapes[n].numel()];
    for layer in (0..n).rev() {
        let out = &masks[layer + 1];
        let mut inp = vec![false; shapes[layer].numel()];
        match (&model.layers()[layer], &trace.records[layer]) {
            (LayerSpec::Conv2d(conv), _) => {
                for (o, _) in out.iter().enumerate().filter(|(_, &r)| r) {
                    for_each_receptive(conv, &shapes[layer], &shapes[layer + 1], o, |i| inp[i] = true);
                }
            }
            (LayerSpec::MaxPool2d(_), LayerRecord::PoolIndices(idx)) => {
                for (&i, _) in idx.iter().zip(out).filter(|(_, &r)| r) {
                    inp[i] = true;
                }
            }
            (LayerSpec::Relu, LayerRecord::Mask(mask)) => {
                inp.iter_mut()
                    .zip(out.iter().zip(mask))
                    .for_each(|(v, (&r, &m))| *v = r && m);
            }
            _ => inp.copy_from_slice(out),
        }
        masks[layer] = inp;
    }
    RetentionSet { masks }
}

/// Neuron-time accounting for one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NeuronTimesReport {
    /// One-based layer index.
    pub layer: usize,
    pub kind: LayerKind,
    pub total: usize,
    pub decision: usize,
    pub abandoned: usize,
    /// Retained input neurons.
    pub distinct: usize,
}

/// Counts (input neuron, output computation) incidences of one-based `layer`.
///
/// A convolution incidence is one in-bounds kernel tap; a max pool window
/// contributes one incidence per tap, of which only the stored argmax of a
/// retained output is decision-making; elementwise layers have one
/// incidence per neuron.
pub fn count_neuron_times(
    model: &ModelGraph,
    trace: &ForwardTrace,
    retention: &RetentionSet,
    layer: usize,
) -> Result<NeuronTimesReport> {
    let n = model.num_layers();
    if layer == 0 || layer > n {
        return Err(Error::BadLayer { layer, num_layers: n });
    }
    let l = layer - 1;
    let shapes = model.boundary_shapes();
    let out = &retention.masks[l + 1];
    let spec = &model.layers()[l];
    let (total, decision) = match (spec, &trace.records[l]) {
        (LayerSpec::Conv2d(conv), _) => {
            let mut total = 0;
            let mut decision = 0;
            for (o, &r) in out.iter().enumerate() {
                let mut taps = 0;
                for_each_receptive(conv, &shapes[l], &shapes[l + 1], o, |_| taps += 1);
                total += taps;
                if r {
                    decision += taps;
                }
            }
            (total, decision)
        }
        (LayerSpec::MaxPool2d(pool), _) => {
            let window = pool.kernel.0 * pool.kernel.1;
            let kept = out.iter().filter(|&&r| r).count();
            (out.len() * window, kept)
        }
        (LayerSpec::Relu, LayerRecord::Mask(mask)) => {
            let kept = out.iter().zip(mask).filter(|(&r, &m)| r && m).count();
            (out.len(), kept)
        }
        _ => (out.len(), out.iter().filter(|&&r| r).count()),
    };
    Ok(NeuronTimesReport {
        layer,
        kind: spec.kind(),
        total,
        decision,
        abandoned: total - decision,
        distinct: retention.count(l),
    })
}
