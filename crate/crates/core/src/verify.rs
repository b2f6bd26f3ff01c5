//! Self-checks run by `naflow verify` against a loaded model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attribution::{cascade_coefficients, contribution_weights, FeatureVector, VectorRole};
use crate::error::{Error, Result};
use crate::model::{
    conv_apply, forward_trace, head_forward, head_vjp, toy::random_input, ForwardTrace, HeadSpec, LayerKind, LayerSpec,
    ModelGraph,
};
use crate::nabp::{assemble_conv_jacobian, backprop_feature_maps, compute_retention, frozen_forward, layer_round_trip};
use crate::par::Exec;
use crate::tensor::{fd_jacobian, Tensor, DEFAULT_FD_STEP};

pub const VERIFY_INPUTS: usize = 3;
pub const JACOBIAN_TOLERANCE: f64 = 1e-4;
pub const ROUND_TRIP_TOLERANCE: f64 = 1e-6;
/// LeakyReLU divides then multiplies by the slope, which may cost an ulp.
pub const BIJECTION_TOLERANCE: f64 = 1e-12;
pub const COEFFICIENT_TOLERANCE: f64 = 1e-4;
pub const OMEGA_PAIRS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst error observed.
    pub residual: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    /// Diagnostics that do not fail the run.
    pub notes: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn check(&mut self, name: String, residual: f64, tolerance: f64) {
        self.checks.push(CheckResult {
            passed: residual <= tolerance,
            name,
            residual,
            tolerance,
        });
    }
}

fn max_scaled_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Conv Jacobian assembly against central differences, one check per conv layer.
pub fn jacobian_suite(model: &ModelGraph, trace: &ForwardTrace, exec: Exec, report: &mut VerifyReport) -> Result<()> {
    let shapes = model.boundary_shapes();
    for (l, layer) in model.layers().iter().enumerate() {
        let LayerSpec::Conv2d(conv) = layer else { continue };
        let jac = assemble_conv_jacobian(conv, &shapes[l], &shapes[l + 1], exec);
        let f = |x: &[f64]| conv_apply(conv, &shapes[l], x, &shapes[l + 1], true, Exec::Sequential).into_data();
        let fd = fd_jacobian(f, trace.activations[l].data(), DEFAULT_FD_STEP, exec)?;
        let dense = jac.matrix.to_dense();
        let err = dense
            .data()
            .iter()
            .zip(fd.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        report.check(format!("jacobian layer {} (conv2d)", l + 1), err, JACOBIAN_TOLERANCE);
    }
    Ok(())
}

/// Inverse-then-forward reproduction of every back-propagated map.
pub fn round_trip_suite(
    model: &ModelGraph,
    traces: &[ForwardTrace],
    exec: Exec,
    report: &mut VerifyReport,
) -> Result<()> {
    let mut worst = vec![0.0f64; model.num_layers()];
    for trace in traces {
        let stack = backprop_feature_maps(model, trace, exec)?;
        let retention = compute_retention(model, trace);
        for (l, w) in worst.iter_mut().enumerate() {
            let rt = layer_round_trip(model, trace, &stack, &retention, l, exec);
            *w = w.max(rt.max_relative_error);
        }
        for d in &stack.diagnostics {
            if !d.clamped_channels.is_empty() {
                let note = format!(
                    "layer {} (batchnorm2d): near-zero scale clamped to 1e-12 in channels {:?}",
                    d.layer + 1,
                    d.clamped_channels
                );
                if !report.notes.contains(&note) {
                    report.notes.push(note);
                }
            }
            if d.fallback() {
                let note = format!(
                    "layer {} ({}): approximate minimum-norm reconstruction",
                    d.layer + 1,
                    d.kind
                );
                if !report.notes.contains(&note) {
                    report.notes.push(note);
                }
            }
        }
    }
    for (l, w) in worst.into_iter().enumerate() {
        let kind = model.layers()[l].kind();
        let tol = match kind {
            LayerKind::Relu | LayerKind::MaxPool2d => 0.0,
            LayerKind::LeakyRelu => BIJECTION_TOLERANCE,
            _ => ROUND_TRIP_TOLERANCE,
        };
        report.check(format!("round trip layer {} ({kind})", l + 1), w, tol);
    }
    Ok(())
}

/// Head seed for the coefficient oracle: the predicted class, or a random
/// unit direction in feature space.
pub fn oracle_seed(model: &ModelGraph, trace: &ForwardTrace, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = model.head_output_len();
    match model.head() {
        HeadSpec::Classifier { .. } => {
            let mut s = vec![0.0; k];
            s[crate::model::argmax(trace.output())] = 1.0;
            s
        }
        HeadSpec::Embedding { .. } => {
            let v: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            v.into_iter().map(|x| x / n).collect()
        }
    }
}

/// Cascaded coefficients against the central-difference gradient of
/// `seed · head(frozen backbone)` at every boundary.
pub fn coefficient_suite(
    model: &ModelGraph,
    traces: &[ForwardTrace],
    rng: &mut ChaCha8Rng,
    exec: Exec,
    report: &mut VerifyReport,
) -> Result<()> {
    let n = model.num_layers();
    let mut worst = vec![0.0f64; n + 1];
    for trace in traces {
        let seed = oracle_seed(model, trace, rng);
        let top = head_vjp(model, trace, &seed)?;
        let stack = cascade_coefficients(model, trace, top, exec)?;
        let out_shape = model.output_shape().clone();
        for (b, w) in worst.iter_mut().enumerate() {
            let f = |x: &[f64]| -> Vec<f64> {
                let a = frozen_forward(model, trace, b, n, x, true, Exec::Sequential);
                let a = Tensor::new(out_shape.clone(), a).expect("backbone shape");
                match head_forward(model.head(), &a) {
                    Ok(h) => vec![h.output.iter().zip(&seed).map(|(o, s)| o * s).sum()],
                    Err(_) => vec![f64::NAN],
                }
            };
            let fd = fd_jacobian(f, trace.activations[b].data(), DEFAULT_FD_STEP, exec)?;
            *w = w.max(max_scaled_diff(stack.coefficients[b].data(), fd.row(0)));
        }
    }
    for (b, w) in worst.into_iter().enumerate() {
        let name = if b == n {
            "coefficients at backbone output".to_string()
        } else {
            format!("coefficients at input of layer {}", b + 1)
        };
        report.check(name, w, COEFFICIENT_TOLERANCE);
    }
    Ok(())
}

/// Worst violations of the contribution-weight properties over random pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OmegaStats {
    pub pairs: usize,
    pub sum_error: f64,
    /// `max |ω(cq, s) − ω(q, s)|` divided by `max(1, ‖ω‖∞) · Σ|ω|`: rounding
    /// `c·q` perturbs the input by one ulp, which ω amplifies by that factor.
    pub scale_error: f64,
    pub odd_mismatches: usize,
    pub orthogonal_rejected: bool,
}

/// Random query/support pairs of length `1..=64`; near-orthogonal pairs are redrawn.
pub fn omega_properties(rng: &mut ChaCha8Rng, pairs: usize) -> OmegaStats {
    let mut stats = OmegaStats::default();
    while stats.pairs < pairs {
        let d = rng.gen_range(1..=64);
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dot: f64 = q.iter().zip(&s).map(|(a, b)| a * b).sum();
        if dot.abs() < 1e-9 {
            continue;
        }
        stats.pairs += 1;
        let fq = FeatureVector::new(q, VectorRole::Query).expect("finite");
        let fs = FeatureVector::new(s, VectorRole::Support).expect("finite");
        let w = contribution_weights(&fq, &fs).expect("non-orthogonal");
        stats.sum_error = stats.sum_error.max((w.sum() - dot.signum()).abs());
        let c = rng.gen_range(0.01..100.0);
        for (a, b) in [(fq.scaled(c).unwrap(), fs.clone()), (fq.clone(), fs.scaled(c).unwrap())] {
            let ws = contribution_weights(&a, &b).expect("non-orthogonal");
            let e = ws
                .omega
                .iter()
                .zip(&w.omega)
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            let big = w.omega.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            stats.scale_error = stats.scale_error.max(e / (big * w.condition().max(1.0)));
        }
        let neg = contribution_weights(&fq.scaled(-1.0).unwrap(), &fs).expect("non-orthogonal");
        if neg.omega.iter().zip(&w.omega).any(|(x, y)| *x != -*y) {
            stats.odd_mismatches += 1;
        }
    }
    let a = FeatureVector::new(vec![1.0, 0.0, 2.0], VectorRole::Query).unwrap();
    let b = FeatureVector::new(vec![0.0, 5.0, 0.0], VectorRole::Support).unwrap();
    stats.orthogonal_rejected = matches!(contribution_weights(&a, &b), Err(Error::OrthogonalPair { .. }));
    stats
}

pub fn omega_suite(rng: &mut ChaCha8Rng, report: &mut VerifyReport) {
    let s = omega_properties(rng, OMEGA_PAIRS);
    report.check("omega sums to ±1".into(), s.sum_error, 1e-9);
    report.check("omega scale invariance".into(), s.scale_error, 1e-12);
    report.check("omega odd under negation".into(), s.odd_mismatches as f64, 0.0);
    report.check(
        "orthogonal pair rejected".into(),
        if s.orthogonal_rejected { 0.0 } else { 1.0 },
        0.0,
    );
}

/// Runs every suite on [`VERIFY_INPUTS`] seeded random inputs.
pub fn verify_model(model: &ModelGraph, seed: u64, exec: Exec) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = (0..VERIFY_INPUTS)
        .map(|_| random_input(model.input_shape(), &mut rng))
        .collect();
    let traces = exec
        .map(inputs.len(), |i| forward_trace(model, &inputs[i], exec))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut report = VerifyReport::default();
    jacobian_suite(model, &traces[0], exec, &mut report)?;
    round_trip_suite(model, &traces, exec, &mut report)?;
    coefficient_suite(model, &traces, &mut rng, exec, &mut report)?;
    omega_suite(&mut rng, &mut report);
    Ok(report)
}
