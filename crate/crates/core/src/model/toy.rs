//! Small deterministic models used by tests, benches, examples and `verify`.
//!
//! Parameters are rounded to `f32` so a save/load round trip is lossless.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BatchNorm2d, Conv2d, HeadSpec, LayerSpec, MaxPool2d, ModelGraph};
use crate::tensor::{DenseMatrix, Shape, Tensor};

fn f32r(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Conv with a near-identity centre tap on the first `min(in, out)` channel
/// pairs, which keeps the leading square block of its Jacobian well conditioned.
pub fn near_identity_conv(
    rng: &mut ChaCha8Rng,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Conv2d {
    let mut w = Vec::with_capacity(out_channels * in_channels * kernel * kernel);
    let centre = kernel / 2;
    for co in 0..out_channels {
        for ci in 0..in_channels {
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let spread = if co < in_channels { 0.05 } else { 0.3 };
                    let mut v = rng.gen_range(-spread..spread);
                    if ky == centre && kx == centre && co == ci {
                        v += 1.0;
                    }
                    w.push(f32r(v));
                }
            }
        }
    }
    Conv2d {
        in_channels,
        out_channels,
        kernel: (kernel, kernel),
        stride: (stride, stride),
        padding: (padding, padding),
        weight: Tensor::new(Shape::new(vec![out_channels, in_channels, kernel, kernel]).unwrap(), w).unwrap(),
        bias: (0..out_channels).map(|_| f32r(rng.gen_range(-0.1..0.1))).collect(),
    }
}

pub fn random_batchnorm(rng: &mut ChaCha8Rng, channels: usize) -> BatchNorm2d {
    BatchNorm2d {
        scale: (0..channels).map(|_| f32r(rng.gen_range(0.5..1.5))).collect(),
        shift: (0..channels).map(|_| f32r(rng.gen_range(-0.2..0.2))).collect(),
        running_mean: (0..channels).map(|_| f32r(rng.gen_range(-0.1..0.1))).collect(),
        running_var: (0..channels).map(|_| f32r(rng.gen_range(0.5..2.0))).collect(),
        eps: f32r(1e-5),
    }
}

fn random_classifier(rng: &mut ChaCha8Rng, classes: usize, channels: usize) -> HeadSpec {
    let w = (0..classes * channels)
        .map(|_| f32r(rng.gen_range(-1.0..1.0)))
        .collect();
    HeadSpec::Classifier {
        weight: DenseMatrix::from_vec(classes, channels, w).unwrap(),
        bias: (0..classes).map(|_| f32r(rng.gen_range(-0.1..0.1))).collect(),
    }
}

fn pool2() -> LayerSpec {
    LayerSpec::MaxPool2d(MaxPool2d {
        kernel: (2, 2),
        stride: (2, 2),
    })
}

/// conv → BN → ReLU → maxpool → conv → ReLU on a `3 × 16 × 16` input, three classes.
pub fn toy_classifier() -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e61_666c);
    let layers = vec![
        LayerSpec::Conv2d(near_identity_conv(&mut rng, 3, 4, 3, 1, 1)),
        LayerSpec::BatchNorm2d(random_batchnorm(&mut rng, 4)),
        LayerSpec::Relu,
        pool2(),
        LayerSpec::Conv2d(near_identity_conv(&mut rng, 4, 6, 3, 1, 1)),
        LayerSpec::Relu,
    ];
    let head = random_classifier(&mut rng, 3, 6);
    ModelGraph::new("toy-classifier", Shape::chw(3, 16, 16).unwrap(), layers, head).unwrap()
}

/// conv → ReLU → maxpool → conv on a `3 × 8 × 8` input, two classes.
pub fn toy_four_layer() -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layers = vec![
        LayerSpec::Conv2d(near_identity_conv(&mut rng, 3, 4, 3, 1, 1)),
        LayerSpec::Relu,
        pool2(),
        LayerSpec::Conv2d(near_identity_conv(&mut rng, 4, 5, 3, 1, 1)),
    ];
    let head = random_classifier(&mut rng, 2, 5);
    ModelGraph::new("toy-four-layer", Shape::chw(3, 8, 8).unwrap(), layers, head).unwrap()
}

/// conv → LeakyReLU → maxpool → conv → LeakyReLU with an L2-normalised embedding head.
pub fn toy_embedding() -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe3b);
    let layers = vec![
        LayerSpec::Conv2d(near_identity_conv(&mut rng, 3, 4, 3, 1, 1)),
        LayerSpec::LeakyRelu { negative_slope: 0.1 },
        pool2(),
        LayerSpec::Conv2d(near_identity_conv(&mut rng, 4, 8, 3, 1, 1)),
        LayerSpec::LeakyRelu { negative_slope: 0.1 },
    ];
    ModelGraph::new(
        "toy-embedding",
        Shape::chw(3, 8, 8).unwrap(),
        layers,
        HeadSpec::Embedding { l2_normalize: true },
    )
    .unwrap()
}

/// A stride-2 conv that shrinks `2×8×8` to `2×4×4` followed by a channel
/// expanding conv, so the first layer has fewer outputs than inputs.
pub fn toy_strided() -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let layers = vec![
        LayerSpec::Conv2d(near_identity_conv(&mut rng, 2, 2, 3, 2, 1)),
        LayerSpec::Conv2d(near_identity_conv(&mut rng, 2, 16, 3, 1, 1)),
    ];
    ModelGraph::new(
        "toy-strided",
        Shape::chw(2, 8, 8).unwrap(),
        layers,
        HeadSpec::Embedding { l2_normalize: false },
    )
    .unwrap()
}

/// The neuron-times example: a `1×6×6` map, a 3×3 unpadded conv (16 outputs)
/// and a 2×2 max pool that keeps 4 of them.
pub fn conv_pool_model() -> ModelGraph {
    let mut w = vec![0.0; 9];
    w[4] = 1.0;
    let conv = Conv2d {
        in_channels: 1,
        out_channels: 1,
        kernel: (3, 3),
        stride: (1, 1),
        padding: (0, 0),
        weight: Tensor::new(Shape::new(vec![1, 1, 3, 3]).unwrap(), w).unwrap(),
        bias: vec![0.0],
    };
    ModelGraph::new(
        "conv-pool",
        Shape::chw(1, 6, 6).unwrap(),
        vec![LayerSpec::Conv2d(conv), pool2()],
        HeadSpec::Classifier {
            weight: DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap(),
            bias: vec![0.0],
        },
    )
    .unwrap()
}

/// Conv outputs selected by the pool for [`conv_pool_input`], as `(row, col)`.
pub const CONV_POOL_SELECTED: [(usize, usize); 4] = [(0, 0), (0, 2), (3, 0), (3, 3)];

/// Input whose centre-tap conv output peaks at [`CONV_POOL_SELECTED`] in each
/// pooling window, giving 33 distinct retained input neurons.
pub fn conv_pool_input() -> Tensor {
    let mut data = vec![0.0; 36];
    for (k, v) in data.iter_mut().enumerate() {
        *v = 0.01 * k as f64;
    }
    for &(r, c) in &CONV_POOL_SELECTED {
        data[(r + 1) * 6 + (c + 1)] = 10.0;
    }
    Tensor::new(Shape::chw(1, 6, 6).unwrap(), data).unwrap()
}

/// Smooth deterministic test image in roughly `[-2, 2]`.
pub fn toy_input(shape: &Shape, seed: u64) -> Tensor {
    let (c, h, w) = shape.as_chw().expect("feature-map shape");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let phase = ch as f64 * 0.7;
        for y in 0..h {
            for x in 0..w {
                let base = (y as f64 * 0.45 + phase).sin() + (x as f64 * 0.3 - phase).cos();
                data.push(base + rng.gen_range(-0.5..0.5));
            }
        }
    }
    Tensor::new(shape.clone(), data).unwrap()
}

/// Uniform random input in `[-1, 1]`.
pub fn random_input(shape: &Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.clone(), data).unwrap()
}
