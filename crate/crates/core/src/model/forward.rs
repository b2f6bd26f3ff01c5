use super::{BatchNorm2d, Conv2d, HeadSpec, LayerSpec, MaxPool2d, ModelGraph};
use crate::attribution::{FeatureVector, VectorRole};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensor::{Shape, Tensor};

/// What a layer remembers from the forward pass for the backward passes.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerRecord {
    None,
    /// `forward input ≥ 0`, per neuron.
    Mask(Vec<bool>),
    /// Flat index into the layer input of each output's selected neuron.
    PoolIndices(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrace {
    pub pooled: Vec<f64>,
    pub normalized: Option<Vec<f64>>,
    /// Class scores or the query feature vector.
    pub output: Vec<f64>,
}

/// Activations at every boundary plus per-layer records.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `activations[0]` is the input, `activations[N]` the backbone output.
    pub activations: Vec<Tensor>,
    pub records: Vec<LayerRecord>,
    pub head: HeadTrace,
}

impl ForwardTrace {
    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    pub fn backbone_output(&self) -> &Tensor {
        self.activations.last().expect("trace has activations")
    }

    pub fn output(&self) -> &[f64] {
        &self.head.output
    }
}

pub fn conv2d_forward(conv: &Conv2d, input: &Tensor, with_bias: bool, exec: Exec) -> Result<Tensor> {
    let out_shape = LayerSpec::Conv2d(conv.clone()).output_shape(input.shape())?;
    Ok(conv_apply(
        conv,
        input.shape(),
        input.data(),
        &out_shape,
        with_bias,
        exec,
    ))
}

pub(crate) fn conv_apply(
    conv: &Conv2d,
    in_shape: &Shape,
    x: &[f64],
    out_shape: &Shape,
    with_bias: bool,
    exec: Exec,
) -> Tensor {
    let (cin, h, w) = in_shape.as_chw().expect("validated");
    let (cout, oh, ow) = out_shape.as_chw().expect("validated");
    let (kh, kw) = conv.kernel;
    let (sh, sw) = conv.stride;
    let (ph, pw) = conv.padding;
    let weights = conv.weight.data();
    let planes = exec.map(cout, |co| {
        let mut plane = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = if with_bias { conv.bias[co] } else { 0.0 };
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let wv = weights[((co * cin + ci) * kh + ky) * kw + kx];
                            acc += wv * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
        plane
    });
    Tensor::new(out_shape.clone(), planes.concat()).expect("conv output size")
}

pub fn batchnorm_forward(bn: &BatchNorm2d, input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.shape().as_chw()?;
    if bn.channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm2d has {} channels, input has {c}",
            bn.channels()
        )));
    }
    let hw = h * w;
    let data = input
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let k = i / hw;
            bn.scale[k] * (x - bn.running_mean[k]) / bn.std(k) + bn.shift[k]
        })
        .collect();
    Tensor::new(input.shape().clone(), data)
}

pub fn relu_forward(input: &Tensor) -> (Tensor, Vec<bool>) {
    let mask: Vec<bool> = input.data().iter().map(|&v| v >= 0.0).collect();
    (input.map(|v| if v >= 0.0 { v } else { 0.0 }), mask)
}

pub fn leaky_relu_forward(negative_slope: f64, input: &Tensor) -> (Tensor, Vec<bool>) {
    let mask: Vec<bool> = input.data().iter().map(|&v| v >= 0.0).collect();
    (input.map(|v| if v >= 0.0 { v } else { negative_slope * v }), mask)
}

/// Max pooling; ties go to the smallest flat index.
pub fn maxpool_forward(pool: &MaxPool2d, input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let out_shape = LayerSpec::MaxPool2d(*pool).output_shape(input.shape())?;
    let (c, h, w) = input.shape().as_chw()?;
    let (_, oh, ow) = out_shape.as_chw()?;
    let x = input.data();
    let mut values = Vec::with_capacity(c * oh * ow);
    let mut indices = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                for ky in 0..pool.kernel.0 {
                    for kx in 0..pool.kernel.1 {
                        let idx = (ch * h + oy * pool.stride.0 + ky) * w + ox * pool.stride.1 + kx;
                        if best == usize::MAX || x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                values.push(x[best]);
                indices.push(best);
            }
        }
    }
    Ok((Tensor::new(out_shape, values)?, indices))
}

pub fn apply_layer(layer: &LayerSpec, input: &Tensor, exec: Exec) -> Result<(Tensor, LayerRecord)> {
    Ok(match layer {
        LayerSpec::Conv2d(conv) => (conv2d_forward(conv, input, true, exec)?, LayerRecord::None),
        LayerSpec::BatchNorm2d(bn) => (batchnorm_forward(bn, input)?, LayerRecord::None),
        LayerSpec::Relu => {
            let (t, m) = relu_forward(input);
            (t, LayerRecord::Mask(m))
        }
        LayerSpec::LeakyRelu { negative_slope } => {
            let (t, m) = leaky_relu_forward(*negative_slope, input);
            (t, LayerRecord::Mask(m))
        }
        LayerSpec::MaxPool2d(pool) => {
            let (t, idx) = maxpool_forward(pool, input)?;
            (t, LayerRecord::PoolIndices(idx))
        }
    })
}

/// Runs the backbone and head on a preprocessed input, recording everything.
pub fn forward_trace(model: &ModelGraph, input: &Tensor, exec: Exec) -> Result<ForwardTrace> {
    if input.shape() != model.input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "model expects input {}, got {}",
            model.input_shape(),
            input.shape()
        )));
    }
    input.ensure_finite("model input")?;
    let mut activations = vec![input.clone()];
    let mut records = Vec::with_capacity(model.num_layers());
    for (i, layer) in model.layers().iter().enumerate() {
        let (out, record) =
            apply_layer(layer, activations.last().expect("non-empty"), exec).map_err(|e| e.at_layer(i + 1))?;
        out.ensure_finite(&format!("activation after layer {} ({})", i + 1, layer.kind()))?;
        activations.push(out);
        records.push(record);
    }
    let head = head_forward(model.head(), activations.last().expect("non-empty"))?;
    Ok(ForwardTrace {
        activations,
        records,
        head,
    })
}

fn global_average(a: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = a.shape().as_chw()?;
    let hw = h * w;
    Ok((0..c)
        .map(|k| a.data()[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect())
}

const MIN_NORM: f64 = 1e-12;

pub fn head_forward(head: &HeadSpec, a: &Tensor) -> Result<HeadTrace> {
    let pooled = global_average(a)?;
    let trace = match head {
        HeadSpec::Classifier { weight, bias } => {
            if weight.cols() != pooled.len() {
                return Err(Error::ShapeMismatch("classifier width".into()));
            }
            let mut output = weight.matvec(&pooled, Exec::Sequential);
            output.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            HeadTrace {
                pooled,
                normalized: None,
                output,
            }
        }
        HeadSpec::Embedding { l2_normalize: false } => HeadTrace {
            output: pooled.clone(),
            pooled,
            normalized: None,
        },
        HeadSpec::Embedding { l2_normalize: true } => {
            let norm = l2_norm(&pooled);
            if norm < MIN_NORM {
                return Err(Error::DegenerateNorm(norm));
            }
            let normalized: Vec<f64> = pooled.iter().map(|v| v / norm).collect();
            HeadTrace {
                output: normalized.clone(),
                pooled,
                normalized: Some(normalized),
            }
        }
    };
    if trace.output.iter().all(|v| v.is_finite()) {
        Ok(trace)
    } else {
        Err(Error::NonFinite("head output".into()))
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Score { class: usize, score: f64 },
    Feature(FeatureVector),
}

/// Class score `y^c` (argmax class by default) or the query feature vector.
pub fn predict(trace: &ForwardTrace, head: &HeadSpec, target: Option<usize>) -> Result<Prediction> {
    match head {
        HeadSpec::Classifier { .. } => {
            let scores = trace.output();
            let class = match target {
                Some(c) if c >= scores.len() => {
                    return Err(Error::BadClass {
                        class: c,
                        num_classes: scores.len(),
                    })
                }
                Some(c) => c,
                None => argmax(scores),
            };
            Ok(Prediction::Score {
                class,
                score: scores[class],
            })
        }
        HeadSpec::Embedding { .. } => Ok(Prediction::Feature(FeatureVector::new(
            trace.output().to_vec(),
            VectorRole::Query,
        )?)),
    }
}

/// Index of the largest value; the first one on ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

/// `seedᵀ · ∂(head output)/∂A^{N+1}` at the traced point.
pub fn head_vjp(model: &ModelGraph, trace: &ForwardTrace, seed: &[f64]) -> Result<Tensor> {
    let a = trace.backbone_output();
    let (c, h, w) = a.shape().as_chw()?;
    let out_len = model.head_output_len();
    if seed.len() != out_len {
        return Err(Error::ShapeMismatch(format!(
            "head seed has {} entries, head output has {out_len}",
            seed.len()
        )));
    }
    let pooled_grad: Vec<f64> = match model.head() {
        HeadSpec::Classifier { weight, .. } => weight.vjp(seed),
        HeadSpec::Embedding { l2_normalize: false } => seed.to_vec(),
        HeadSpec::Embedding { l2_normalize: true } => {
            let pooled = &trace.head.pooled;
            let norm = l2_norm(pooled);
            if norm < MIN_NORM {
                return Err(Error::DegenerateNorm(norm));
            }
            // d(v/|v|)/dv = (I − u uᵀ)/|v|
            let u: Vec<f64> = pooled.iter().map(|v| v / norm).collect();
            let su: f64 = seed.iter().zip(&u).map(|(s, x)| s * x).sum();
            seed.iter().zip(&u).map(|(s, x)| (s - su * x) / norm).collect()
        }
    };
    let hw = (h * w) as f64;
    let mut out = Vec::with_capacity(c * h * w);
    for g in pooled_grad.iter().take(c) {
        out.extend(std::iter::repeat_n(g / hw, h * w));
    }
    Tensor::new(a.shape().clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseMatrix;

    fn t3(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(Shape::chw(c, h, w).unwrap(), data).unwrap()
    }

    #[test]
    fn one_by_one_conv_applies_weight_and_bias() {
        let conv = Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            weight: Tensor::new(Shape::new(vec![1, 1, 1, 1]).unwrap(), vec![2.0]).unwrap(),
            bias: vec![1.0],
        };
        let out = conv2d_forward(&conv, &t3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]), true, Exec::Sequential).unwrap();
        assert_eq!(out.data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn padded_conv_matches_hand_computation() {
        // 3x3 all-ones kernel with zero padding sums the 3x3 neighbourhood.
        let conv = Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (1, 1),
            weight: Tensor::filled(Shape::new(vec![1, 1, 3, 3]).unwrap(), 1.0),
            bias: vec![0.0],
        };
        let x = t3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let out = conv2d_forward(&conv, &x, true, Exec::Parallel).unwrap();
        assert_eq!(out.data(), &[10.0; 4]);
    }

    #[test]
    fn relu_masks_non_negative_inputs() {
        let (y, mask) = relu_forward(&Tensor::vector(vec![-1.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 2.0]);
        assert_eq!(mask, vec![false, true]);
    }

    #[test]
    fn maxpool_records_argmax() {
        let pool = MaxPool2d {
            kernel: (2, 2),
            stride: (2, 2),
        };
        let (y, idx) = maxpool_forward(&pool, &t3(1, 2, 2, vec![1.0, 3.0, 2.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn maxpool_ties_pick_smallest_index() {
        let pool = MaxPool2d {
            kernel: (2, 2),
            stride: (2, 2),
        };
        let (_, idx) = maxpool_forward(&pool, &t3(1, 2, 2, vec![1.0, 5.0, 5.0, 5.0])).unwrap();
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn batchnorm_matches_formula() {
        let bn = BatchNorm2d {
            scale: vec![2.0],
            shift: vec![3.0],
            running_mean: vec![1.0],
            running_var: vec![4.0],
            eps: 0.0,
        };
        let y = batchnorm_forward(&bn, &t3(1, 1, 1, vec![3.0])).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn identity_classifier_passes_scores() {
        let head = HeadSpec::Classifier {
            weight: DenseMatrix::identity(2),
            bias: vec![0.0; 2],
        };
        let h = head_forward(&head, &t3(2, 1, 1, vec![0.7, -0.2])).unwrap();
        assert_eq!(h.output, vec![0.7, -0.2]);
    }

    #[test]
    fn l2_embedding_of_three_four() {
        let h = head_forward(
            &HeadSpec::Embedding { l2_normalize: true },
            &t3(2, 1, 1, vec![3.0, 4.0]),
        )
        .unwrap();
        assert!((h.output[0] - 0.6).abs() < 1e-15 && (h.output[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn degenerate_norm_rejected() {
        let r = head_forward(
            &HeadSpec::Embedding { l2_normalize: true },
            &t3(2, 1, 1, vec![0.0, 0.0]),
        );
        assert!(matches!(r, Err(Error::DegenerateNorm(_))));
    }
}
