use crate::error::{Error, Result};
use crate::model::{conv_apply, ForwardTrace, LayerRecord, LayerSpec, ModelGraph};
use crate::par::Exec;
use crate::tensor::DenseMatrix;

/// Applies zero-based layer `layer` to flat input `x` with the traced ReLU
/// masks and pooling indices held fixed. With `affine == false` biases and
/// shifts are dropped, leaving the linear part.
pub fn frozen_layer_apply(
    model: &ModelGraph,
    trace: &ForwardTrace,
    layer: usize,
    x: &[f64],
    affine: bool,
    exec: Exec,
) -> Vec<f64> {
    let shapes = model.boundary_shapes();
    let (in_shape, out_shape) = (&shapes[layer], &shapes[layer + 1]);
    match (&model.layers()[layer], &trace.records[layer]) {
        (LayerSpec::Conv2d(conv), _) => conv_apply(conv, in_shape, x, out_shape, affine, exec).into_data(),
        (LayerSpec::BatchNorm2d(bn), _) => {
            let (_, h, w) = in_shape.as_chw().expect("validated");
            let hw = h * w;
            x.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let c = i / hw;
                    if affine {
                        bn.scale[c] * (v - bn.running_mean[c]) / bn.std(c) + bn.shift[c]
                    } else {
                        bn.scale[c] / bn.std(c) * v
                    }
                })
                .collect()
        }
        (LayerSpec::Relu, LayerRecord::Mask(mask)) => {
            x.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect()
        }
        (LayerSpec::LeakyRelu { negative_slope }, LayerRecord::Mask(mask)) => x
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { negative_slope * v })
            .collect(),
        (LayerSpec::MaxPool2d(_), LayerRecord::PoolIndices(idx)) => idx.iter().map(|&i| x[i]).collect(),
        (spec, record) => panic!("trace record {record:?} does not match layer {}", spec.kind()),
    }
}

/// Frozen-pattern forward from boundary `from` to boundary `to`.
pub fn frozen_forward(
    model: &ModelGraph,
    trace: &ForwardTrace,
    from: usize,
    to: usize,
    x: &[f64],
    affine: bool,
    exec: Exec,
) -> Vec<f64> {
    (from..to).fold(x.to_vec(), |v, l| frozen_layer_apply(model, trace, l, &v, affine, exec))
}

/// Layers `g_l..g_{l+M-1}` under the frozen pattern, written as `J·x + θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineComposite {
    pub jacobian: DenseMatrix,
    /// Composite output at zero input.
    pub offset: Vec<f64>,
    pub depth: usize,
}

impl AffineComposite {
    pub fn apply(&self, x: &[f64], exec: Exec) -> Vec<f64> {
        let mut y = self.jacobian.matvec(x, exec);
        y.iter_mut().zip(&self.offset).for_each(|(v, t)| *v += t);
        y
    }
}

/// Composes `depth` layers starting at zero-based `layer`.
pub fn compose_range(
    model: &ModelGraph,
    trace: &ForwardTrace,
    layer: usize,
    depth: usize,
    exec: Exec,
) -> AffineComposite {
    assert!(depth >= 1 && layer + depth <= model.num_layers(), "composite range");
    let shapes = model.boundary_shapes();
    let p = shapes[layer].numel();
    let q = shapes[layer + depth].numel();
    let columns = exec.map(p, |j| {
        let mut e = vec![0.0; p];
        e[j] = 1.0;
        frozen_forward(model, trace, layer, layer + depth, &e, false, Exec::Sequential)
    });
    let mut jacobian = DenseMatrix::zeros(q, p);
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            jacobian[(i, j)] = v;
        }
    }
    let offset = frozen_forward(model, trace, layer, layer + depth, &vec![0.0; p], true, exec);
    AffineComposite {
        jacobian,
        offset,
        depth,
    }
}

/// Smallest stack starting at `layer` whose output has at least `p` neurons.
pub fn compose_frozen_affine(
    model: &ModelGraph,
    trace: &ForwardTrace,
    layer: usize,
    p: usize,
    exec: Exec,
) -> Result<AffineComposite> {
    if layer >= model.num_layers() {
        return Err(Error::BadLayer {
            layer: layer + 1,
            num_layers: model.num_layers(),
        });
    }
    let shapes = model.boundary_shapes();
    let depth = (1..=model.num_layers() - layer)
        .find(|&m| shapes[layer + m].numel() >= p)
        .ok_or(Error::Unreachable {
            layer: layer + 1,
            needed: p,
        })?;
    Ok(compose_range(model, trace, layer, depth, exec))
}
