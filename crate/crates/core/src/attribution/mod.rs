//! Importance coefficients: seeding at the backbone output from a class score
//! or a query/support similarity, and the backward cascade to the input.

use crate::error::{Error, Result};
use crate::model::{head_vjp, ForwardTrace, HeadSpec, LayerRecord, LayerSpec, ModelGraph};
use crate::nabp::assemble_conv_jacobian;
use crate::par::Exec;
use crate::tensor::Tensor;

/// Below this magnitude a dot product or norm counts as zero.
pub const ZERO_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VectorRole {
    Query,
    Support,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    role: VectorRole,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, role: VectorRole) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("feature vector must have at least one entry".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector".into()));
        }
        Ok(FeatureVector { values, role })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn role(&self) -> VectorRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same vector, scaled by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        FeatureVector::new(self.values.iter().map(|v| v * c).collect(), self.role)
    }
}

fn same_len(q: &FeatureVector, s: &FeatureVector) -> Result<()> {
    if q.len() == s.len() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "query has {} channels, support has {}",
            q.len(),
            s.len()
        )))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum accurate to about one rounding regardless of cancellation
/// (Neumaier's compensated summation over error-free products).
fn accurate_sum(terms: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    let mut add = |x: f64| {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    };
    for (hi, lo) in terms {
        add(hi);
        add(lo);
    }
    s + c
}

/// `Σ a_i b_i` with each product split exactly into `hi + lo`.
fn accurate_dot(a: &[f64], b: &[f64]) -> f64 {
    accurate_sum(a.iter().zip(b).map(|(&x, &y)| {
        let p = x * y;
        (p, x.mul_add(y, -p))
    }))
}

pub fn cosine_similarity(q: &FeatureVector, s: &FeatureVector) -> Result<f64> {
    same_len(q, s)?;
    let nq = dot(q.values(), q.values()).sqrt();
    let ns = dot(s.values(), s.values()).sqrt();
    if nq <= ZERO_TOLERANCE || ns <= ZERO_TOLERANCE {
        return Err(Error::ZeroVector);
    }
    Ok((dot(q.values(), s.values()) / (nq * ns)).clamp(-1.0, 1.0))
}

/// Signed share of the similarity carried by each channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionWeights {
    pub omega: Vec<f64>,
}

impl ContributionWeights {
    pub fn sum(&self) -> f64 {
        accurate_sum(self.omega.iter().map(|&w| (w, 0.0)))
    }

    /// `Σ |ω_d|`, the relative condition number of ω with respect to
    /// componentwise perturbations of either vector.
    pub fn condition(&self) -> f64 {
        self.omega.iter().map(|w| w.abs()).sum()
    }
}

/// `ω_d = q_d s_d / |Σ q·s|`.
pub fn contribution_weights(q: &FeatureVector, s: &FeatureVector) -> Result<ContributionWeights> {
    same_len(q, s)?;
    let total = accurate_dot(q.values(), s.values());
    if total.abs() <= ZERO_TOLERANCE {
        return Err(Error::OrthogonalPair { dot: total });
    }
    let scale = total.abs();
    Ok(ContributionWeights {
        omega: q.values().iter().zip(s.values()).map(|(a, b)| a * b / scale).collect(),
    })
}

/// `∂y^c/∂A^{N+1}` for a classifier head.
pub fn seed_class_score(model: &ModelGraph, trace: &ForwardTrace, class: usize) -> Result<Tensor> {
    let HeadSpec::Classifier { weight, .. } = model.head() else {
        return Err(Error::ShapeMismatch("class seeding needs a classifier head".into()));
    };
    let k = weight.rows();
    if class >= k {
        return Err(Error::BadClass { class, num_classes: k });
    }
    let mut seed = vec![0.0; k];
    seed[class] = 1.0;
    head_vjp(model, trace, &seed)
}

/// `ωᵀ · ∂V_Q/∂A^{N+1}` for an embedding head, with ω held constant.
pub fn seed_similarity(model: &ModelGraph, trace: &ForwardTrace, support: &FeatureVector) -> Result<Tensor> {
    if !matches!(model.head(), HeadSpec::Embedding { .. }) {
        return Err(Error::ShapeMismatch(
            "similarity seeding needs an embedding head".into(),
        ));
    }
    let query = FeatureVector::new(trace.output().to_vec(), VectorRole::Query)?;
    let omega = contribution_weights(&query, support)?;
    head_vjp(model, trace, &omega.omega)
}

/// Coefficients per boundary; `coefficients[b]` is shaped like `A^{b+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientStack {
    pub coefficients: Vec<Tensor>,
}

/// `λ · J` for zero-based `layer` under the traced pattern.
pub fn layer_vjp(model: &ModelGraph, trace: &ForwardTrace, layer: usize, lambda: &[f64], exec: Exec) -> Vec<f64> {
    let shapes = model.boundary_shapes();
    let (in_shape, out_shape) = (&shapes[layer], &shapes[layer + 1]);
    match (&model.layers()[layer], &trace.records[layer]) {
        (LayerSpec::Conv2d(conv), _) => assemble_conv_jacobian(conv, in_shape, out_shape, exec)
            .matrix
            .vjp(lambda, exec),
        (LayerSpec::BatchNorm2d(bn), _) => {
            let (_, h, w) = in_shape.as_chw().expect("validated");
            let hw = h * w;
            lambda
                .iter()
                .enumerate()
                .map(|(i, &v)| v * bn.scale[i / hw] / bn.std(i / hw))
                .collect()
        }
        (LayerSpec::Relu, LayerRecord::Mask(mask)) => lambda
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect(),
        (LayerSpec::LeakyRelu { negative_slope }, LayerRecord::Mask(mask)) => lambda
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { negative_slope * v })
            .collect(),
        (LayerSpec::MaxPool2d(_), LayerRecord::PoolIndices(idx)) => {
            let mut out = vec![0.0; in_shape.numel()];
            for (&i, &v) in idx.iter().zip(lambda) {
                out[i] += v;
            }
            out
        }
        (spec, record) => panic!("trace record {record:?} does not match layer {}", spec.kind()),
    }
}

/// Pushes the seed at the backbone output back through every layer.
pub fn cascade_coefficients(
    model: &ModelGraph,
    trace: &ForwardTrace,
    seed: Tensor,
    exec: Exec,
) -> Result<CoefficientStack> {
    let n = model.num_layers();
    let shapes = model.boundary_shapes();
    if seed.shape() != &shapes[n] {
        return Err(Error::ShapeMismatch(format!(
            "seed has shape {}, backbone output is {}",
            seed.shape(),
            shapes[n]
        )));
    }
    let mut coefficients = vec![seed];
    for layer in (0..n).rev() {
        let upper = coefficients.last().expect("non-empty");
        let lower = layer_vjp(model, trace, layer, upper.data(), exec);
        let t = Tensor::new(shapes[layer].clone(), lower)?;
        t.ensure_finite("importance coefficients")
            .map_err(|e| e.at_layer(layer + 1))?;
        coefficients.push(t);
    }
    coefficients.reverse();
    Ok(CoefficientStack { coefficients })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec(), VectorRole::Query).unwrap()
    }

    #[test]
    fn feature_vector_validation() {
        assert!(FeatureVector::new(vec![], VectorRole::Support).is_err());
        assert!(FeatureVector::new(vec![f64::NAN], VectorRole::Support).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&fv(&[1.0, 2.0]), &fv(&[1.0, 2.0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine_similarity(&fv(&[3.0, 4.0]), &fv(&[4.0, 3.0])).unwrap() - 0.96).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&fv(&[0.0, 0.0]), &fv(&[1.0, 0.0])),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn omega_examples() {
        let w = contribution_weights(&fv(&[1.0, 0.0, 0.0]), &fv(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(w.omega, vec![1.0, 0.0, 0.0]);
        let w = contribution_weights(&fv(&[3.0, 4.0]), &fv(&[4.0, 3.0])).unwrap();
        assert_eq!(w.omega, vec![0.5, 0.5]);
        let w = contribution_weights(&fv(&[2.0, 1.0]), &fv(&[1.0, -4.0])).unwrap();
        assert_eq!(w.omega, vec![1.0, -2.0]);
        assert_eq!(w.sum(), -1.0);
        let e = contribution_weights(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0])).unwrap_err();
        assert_eq!(e.exit_code(), 4);
    }
}
