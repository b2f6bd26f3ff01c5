//! Reference implementations used as oracles by the integration tests.
//!
//! Everything here is written with plain loops and shares no code with the
//! library's kernels beyond reading model parameters.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use naflow::model::{save_model, Conv2d, HeadSpec, LayerSpec, ModelGraph};
use naflow::tensor::{Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn chw(s: &Shape) -> (usize, usize, usize) {
    let d = s.dims();
    (d[0], d[1], d[2])
}

pub fn ref_conv(conv: &Conv2d, x: &[f64], ins: &Shape, outs: &Shape, bias: bool) -> Vec<f64> {
    let (c, h, w) = chw(ins);
    let (oc, oh, ow) = chw(outs);
    let (kh, kw) = conv.kernel;
    let wt = conv.weight.data();
    let mut y = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = if bias { conv.bias[o] } else { 0.0 };
                for i in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * conv.stride.0 + ky) as i64 - conv.padding.0 as i64;
                            let ix = (ox * conv.stride.1 + kx) as i64 - conv.padding.1 as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            acc += wt[((o * c + i) * kh + ky) * kw + kx] * x[(i * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                y[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    y
}

/// Forward pass with its own ReLU masks and pooling argmaxes.
pub struct RefTrace {
    pub acts: Vec<Vec<f64>>,
    pub masks: Vec<Option<Vec<bool>>>,
    pub argmax: Vec<Option<Vec<usize>>>,
}

pub fn ref_forward(model: &ModelGraph, x: &[f64]) -> RefTrace {
    let shapes = model.boundary_shapes();
    let mut t = RefTrace {
        acts: vec![x.to_vec()],
        masks: Vec::new(),
        argmax: Vec::new(),
    };
    for (l, layer) in model.layers().iter().enumerate() {
        let a = t.acts[l].clone();
        let (mut mask, mut arg) = (None, None);
        let y = match layer {
            LayerSpec::Conv2d(conv) => ref_conv(conv, &a, &shapes[l], &shapes[l + 1], true),
            LayerSpec::BatchNorm2d(bn) => {
                let (_, h, w) = chw(&shapes[l]);
                a.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let c = i / (h * w);
                        bn.scale[c] * (v - bn.running_mean[c]) / (bn.running_var[c] + bn.eps).sqrt() + bn.shift[c]
                    })
                    .collect()
            }
            LayerSpec::Relu => {
                mask = Some(a.iter().map(|&v| v >= 0.0).collect());
                a.iter().map(|&v| v.max(0.0)).collect()
            }
            LayerSpec::LeakyRelu { negative_slope } => {
                mask = Some(a.iter().map(|&v| v >= 0.0).collect());
                a.iter()
                    .map(|&v| if v >= 0.0 { v } else { negative_slope * v })
                    .collect()
            }
            LayerSpec::MaxPool2d(p) => {
                let (c, h, w) = chw(&shapes[l]);
                let (_, oh, ow) = chw(&shapes[l + 1]);
                let mut idx = Vec::new();
                let mut y = Vec::new();
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = usize::MAX;
                            for ky in 0..p.kernel.0 {
                                for kx in 0..p.kernel.1 {
                                    let k = (ch * h + oy * p.stride.0 + ky) * w + ox * p.stride.1 + kx;
                                    if best == usize::MAX || a[k] > a[best] {
                                        best = k;
                                    }
                                }
                            }
                            idx.push(best);
                            y.push(a[best]);
                        }
                    }
                }
                arg = Some(idx);
                y
            }
        };
        t.masks.push(mask);
        t.argmax.push(arg);
        t.acts.push(y);
    }
    t
}

/// One layer with the reference trace's masks and argmaxes held fixed.
pub fn ref_frozen_layer(model: &ModelGraph, t: &RefTrace, l: usize, x: &[f64]) -> Vec<f64> {
    let shapes = model.boundary_shapes();
    match &model.layers()[l] {
        LayerSpec::Conv2d(conv) => ref_conv(conv, x, &shapes[l], &shapes[l + 1], true),
        LayerSpec::BatchNorm2d(bn) => {
            let (_, h, w) = chw(&shapes[l]);
            x.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let c = i / (h * w);
                    bn.scale[c] * (v - bn.running_mean[c]) / (bn.running_var[c] + bn.eps).sqrt() + bn.shift[c]
                })
                .collect()
        }
        LayerSpec::Relu => x
            .iter()
            .zip(t.masks[l].as_ref().unwrap())
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect(),
        LayerSpec::LeakyRelu { negative_slope } => x
            .iter()
            .zip(t.masks[l].as_ref().unwrap())
            .map(|(&v, &m)| if m { v } else { negative_slope * v })
            .collect(),
        LayerSpec::MaxPool2d(_) => t.argmax[l].as_ref().unwrap().iter().map(|&i| x[i]).collect(),
    }
}

pub fn ref_frozen(model: &ModelGraph, t: &RefTrace, from: usize, to: usize, x: &[f64]) -> Vec<f64> {
    (from..to).fold(x.to_vec(), |v, l| ref_frozen_layer(model, t, l, &v))
}

pub fn ref_head(model: &ModelGraph, a: &[f64]) -> Vec<f64> {
    let (c, h, w) = chw(model.output_shape());
    let hw = (h * w) as f64;
    let pooled: Vec<f64> = (0..c)
        .map(|k| a[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / hw)
        .collect();
    match model.head() {
        HeadSpec::Classifier { weight, bias } => (0..weight.rows())
            .map(|r| bias[r] + (0..c).map(|k| weight[(r, k)] * pooled[k]).sum::<f64>())
            .collect(),
        HeadSpec::Embedding { l2_normalize: false } => pooled,
        HeadSpec::Embedding { l2_normalize: true } => {
            let n = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
            pooled.iter().map(|v| v / n).collect()
        }
    }
}

/// Central differences of a scalar function.
pub fn central_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|j| {
            p[j] = x[j] + h;
            let a = f(&p);
            p[j] = x[j] - h;
            let b = f(&p);
            p[j] = x[j];
            (a - b) / (2.0 * h)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).fold(0.0, |m: f64, (x, y)| m.max((x - y).abs()))
}

/// Retention recomputed from the reference trace.
pub fn ref_retention(model: &ModelGraph, t: &RefTrace) -> Vec<Vec<bool>> {
    let shapes = model.boundary_shapes();
    let n = model.num_layers();
    let mut masks = vec![Vec::new(); n + 1];
    masks[n] = vec![true; shapes[n].numel()];
    for l in (0..n).rev() {
        let mut inp = vec![false; shapes[l].numel()];
        let out = masks[l + 1].clone();
        match &model.layers()[l] {
            LayerSpec::Conv2d(conv) => {
                let (c, h, w) = chw(&shapes[l]);
                let (_, oh, ow) = chw(&shapes[l + 1]);
                for (o, _) in out.iter().enumerate().filter(|(_, r)| **r) {
                    let (oy, ox) = ((o / ow) % oh, o % ow);
                    for i in 0..c {
                        for ky in 0..conv.kernel.0 {
                            for kx in 0..conv.kernel.1 {
                                let iy = (oy * conv.stride.0 + ky) as i64 - conv.padding.0 as i64;
                                let ix = (ox * conv.stride.1 + kx) as i64 - conv.padding.1 as i64;
                                if iy >= 0 && ix >= 0 && iy < h as i64 && ix < w as i64 {
                                    inp[(i * h + iy as usize) * w + ix as usize] = true;
                                }
                            }
                        }
                    }
                }
            }
            LayerSpec::MaxPool2d(_) => {
                for (o, &i) in t.argmax[l].as_ref().unwrap().iter().enumerate() {
                    if out[o] {
                        inp[i] = true;
                    }
                }
            }
            LayerSpec::Relu => {
                let m = t.masks[l].as_ref().unwrap();
                for k in 0..inp.len() {
                    inp[k] = out[k] && m[k];
                }
            }
            _ => inp = out,
        }
        masks[l] = inp;
    }
    masks
}

pub fn random_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Conv2d {
    let weight = Tensor::new(
        Shape::new(vec![cout, cin, k, k]).unwrap(),
        (0..cout * cin * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: (k, k),
        stride: (stride, stride),
        padding: (pad, pad),
        weight,
        bias: (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    }
}

/// Saves `model` under `root/<name>` and returns the directory.
pub fn write_model(root: &Path, model: &ModelGraph) -> PathBuf {
    let dir = root.join(model.name());
    std::fs::create_dir_all(&dir).unwrap();
    save_model(model, &dir).unwrap();
    dir
}

/// The on-disk model stores f32; reload so tests see what the CLI sees.
pub fn roundtrip_model(root: &Path, model: &ModelGraph) -> ModelGraph {
    naflow::model::load_model(&write_model(root, model)).unwrap()
}

pub fn write_raw(path: &Path, data: &[f64]) {
    let bytes: Vec<u8> = data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).unwrap();
}
