mod common;

use common::*;
use naflow::attribution::*;
use naflow::model::toy::{toy_classifier, toy_embedding, toy_input};
use naflow::model::{forward_trace, head_vjp, HeadSpec, LayerSpec, MaxPool2d, ModelGraph};
use naflow::nabp::backprop_feature_maps;
use naflow::tensor::{DenseMatrix, Shape, Tensor};
use naflow::{Error, Exec};
use proptest::prelude::*;

fn classifier(input: Shape, layers: Vec<LayerSpec>, rows: Vec<Vec<f64>>) -> ModelGraph {
    let k = rows.len();
    ModelGraph::new(
        "cls",
        input,
        layers,
        HeadSpec::Classifier {
            weight: DenseMatrix::from_rows(&rows).unwrap(),
            bias: vec![0.0; k],
        },
    )
    .unwrap()
}

fn embedding(input: Shape, layers: Vec<LayerSpec>, l2_normalize: bool) -> ModelGraph {
    ModelGraph::new("emb", input, layers, HeadSpec::Embedding { l2_normalize }).unwrap()
}

fn support(v: &[f64]) -> FeatureVector {
    FeatureVector::new(v.to_vec(), VectorRole::Support).unwrap()
}

fn query(v: &[f64]) -> FeatureVector {
    FeatureVector::new(v.to_vec(), VectorRole::Query).unwrap()
}

#[test]
fn class_seed_is_fc_row_over_spatial_size() {
    let model = classifier(
        Shape::chw(2, 1, 1).unwrap(),
        vec![LayerSpec::Relu],
        vec![vec![1.0, -2.0], vec![0.5, 0.5]],
    );
    let x = Tensor::new(Shape::chw(2, 1, 1).unwrap(), vec![1.0, 2.0]).unwrap();
    let trace = forward_trace(&model, &x, Exec::Sequential).unwrap();
    assert_eq!(seed_class_score(&model, &trace, 0).unwrap().data(), &[1.0, -2.0]);

    let model = classifier(Shape::chw(1, 2, 2).unwrap(), vec![LayerSpec::Relu], vec![vec![4.0]]);
    let trace = forward_trace(&model, &toy_input(model.input_shape(), 1), Exec::Sequential).unwrap();
    assert_eq!(seed_class_score(&model, &trace, 0).unwrap().data(), &[1.0; 4]);
    assert!(matches!(
        seed_class_score(&model, &trace, 1),
        Err(Error::BadClass {
            class: 1,
            num_classes: 1
        })
    ));
}

#[test]
fn similarity_seed_spreads_omega_over_positions() {
    let model = embedding(Shape::chw(2, 1, 1).unwrap(), vec![LayerSpec::Relu], false);
    let x = Tensor::new(Shape::chw(2, 1, 1).unwrap(), vec![3.0, 4.0]).unwrap();
    let trace = forward_trace(&model, &x, Exec::Sequential).unwrap();
    assert_eq!(
        seed_similarity(&model, &trace, &support(&[4.0, 3.0])).unwrap().data(),
        &[0.5, 0.5]
    );

    let model = embedding(Shape::chw(2, 2, 2).unwrap(), vec![LayerSpec::Relu], false);
    let x = Tensor::new(
        Shape::chw(2, 2, 2).unwrap(),
        vec![2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0],
    )
    .unwrap();
    let trace = forward_trace(&model, &x, Exec::Sequential).unwrap();
    let seed = seed_similarity(&model, &trace, &support(&[1.0, -4.0])).unwrap();
    assert_eq!(seed.data(), &[0.25, 0.25, 0.25, 0.25, -0.5, -0.5, -0.5, -0.5]);

    let orth = seed_similarity(&model, &trace, &support(&[1.0, -2.0])).unwrap_err();
    assert!(matches!(orth, Error::OrthogonalPair { .. }));
    assert_eq!(orth.exit_code(), 4);
}

#[test]
fn similarity_seed_ignores_positive_rescaling_of_query() {
    let model = embedding(Shape::chw(3, 2, 2).unwrap(), vec![LayerSpec::Relu], false);
    let x = toy_input(model.input_shape(), 4).map(|v| v.abs() + 0.1);
    let s = support(&[0.3, -1.0, 2.0]);
    let base = seed_similarity(&model, &forward_trace(&model, &x, Exec::Sequential).unwrap(), &s).unwrap();
    for c in [0.01, 2.5, 300.0] {
        let trace = forward_trace(&model, &x.map(|v| v * c), Exec::Sequential).unwrap();
        let scaled = seed_similarity(&model, &trace, &s).unwrap();
        assert!(max_abs_diff(scaled.data(), base.data()) < 1e-12, "c = {c}");
    }
}

#[test]
fn class_seed_requires_classifier_and_similarity_requires_embedding() {
    let cls = toy_classifier();
    let trace = forward_trace(&cls, &toy_input(cls.input_shape(), 1), Exec::Sequential).unwrap();
    assert!(seed_similarity(&cls, &trace, &support(&[1.0])).is_err());
    let emb = toy_embedding();
    let trace = forward_trace(&emb, &toy_input(emb.input_shape(), 1), Exec::Sequential).unwrap();
    assert!(seed_class_score(&emb, &trace, 0).is_err());
    assert!(matches!(
        seed_similarity(&emb, &trace, &support(&[1.0])),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn relu_vjp_applies_mask() {
    let model = embedding(Shape::chw(1, 1, 2).unwrap(), vec![LayerSpec::Relu], false);
    let x = Tensor::new(Shape::chw(1, 1, 2).unwrap(), vec![1.0, -1.0]).unwrap();
    let trace = forward_trace(&model, &x, Exec::Sequential).unwrap();
    assert_eq!(
        layer_vjp(&model, &trace, 0, &[3.0, 5.0], Exec::Sequential),
        vec![3.0, 0.0]
    );
}

#[test]
fn maxpool_vjp_routes_to_argmax() {
    let pool = MaxPool2d {
        kernel: (2, 2),
        stride: (2, 2),
    };
    let model = embedding(Shape::chw(1, 2, 2).unwrap(), vec![LayerSpec::MaxPool2d(pool)], false);
    let x = Tensor::new(Shape::chw(1, 2, 2).unwrap(), vec![1.0, 9.0, 2.0, 3.0]).unwrap();
    let trace = forward_trace(&model, &x, Exec::Sequential).unwrap();
    assert_eq!(
        layer_vjp(&model, &trace, 0, &[7.0], Exec::Sequential),
        vec![0.0, 7.0, 0.0, 0.0]
    );
}

#[test]
fn cascade_rejects_wrong_seed_shape() {
    let model = toy_classifier();
    let trace = forward_trace(&model, &toy_input(model.input_shape(), 1), Exec::Sequential).unwrap();
    let bad = Tensor::vector(vec![1.0, 2.0]);
    assert!(matches!(
        cascade_coefficients(&model, &trace, bad, Exec::Sequential),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn embedding_coefficients_match_finite_differences() {
    let model = toy_embedding();
    let x = toy_input(model.input_shape(), 21);
    let trace = forward_trace(&model, &x, Exec::Sequential).unwrap();
    let s = support(
        &(0..trace.output().len())
            .map(|d| (d as f64 * 0.9).sin() + 0.2)
            .collect::<Vec<_>>(),
    );
    let omega = contribution_weights(&query(trace.output()), &s).unwrap().omega;
    let seed = seed_similarity(&model, &trace, &s).unwrap();
    let stack = cascade_coefficients(&model, &trace, seed, Exec::Sequential).unwrap();
    let rt = ref_forward(&model, x.data());
    let n = model.num_layers();
    for b in 0..=n {
        let f = |v: &[f64]| {
            let top = ref_frozen(&model, &rt, b, n, v);
            ref_head(&model, &top)
                .iter()
                .zip(&omega)
                .map(|(a, w)| a * w)
                .sum::<f64>()
        };
        let fd = central_grad(f, &rt.acts[b], 1e-4);
        let got = stack.coefficients[b].data();
        let scale = fd.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(max_abs_diff(got, &fd) / scale < 1e-6, "boundary {b}");
    }
}

#[test]
fn class_coefficients_match_finite_differences() {
    let model = toy_classifier();
    let x = toy_input(model.input_shape(), 22);
    let trace = forward_trace(&model, &x, Exec::Sequential).unwrap();
    let seed = seed_class_score(&model, &trace, 1).unwrap();
    let stack = cascade_coefficients(&model, &trace, seed, Exec::Parallel).unwrap();
    let rt = ref_forward(&model, x.data());
    let n = model.num_layers();
    for b in [0, n / 2, n] {
        let f = |v: &[f64]| ref_head(&model, &ref_frozen(&model, &rt, b, n, v))[1];
        let fd = central_grad(f, &rt.acts[b], 1e-4);
        assert!(max_abs_diff(stack.coefficients[b].data(), &fd) < 1e-6, "boundary {b}");
    }
}

#[test]
fn coefficient_shapes_match_feature_maps() {
    for model in [toy_classifier(), toy_embedding()] {
        let trace = forward_trace(&model, &toy_input(model.input_shape(), 3), Exec::Sequential).unwrap();
        let k = model.head_output_len();
        let top = head_vjp(&model, &trace, &vec![1.0; k]).unwrap();
        let coef = cascade_coefficients(&model, &trace, top, Exec::Sequential).unwrap();
        let bpfm = backprop_feature_maps(&model, &trace, Exec::Sequential).unwrap();
        assert_eq!(coef.coefficients.len(), bpfm.maps.len());
        for (c, m) in coef.coefficients.iter().zip(&bpfm.maps) {
            assert_eq!(c.shape(), m.shape());
        }
    }
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=32).prop_flat_map(|d| {
        (
            prop::collection::vec(-10.0f64..10.0, d),
            prop::collection::vec(-10.0f64..10.0, d),
        )
    })
}

proptest! {
    #[test]
    fn omega_sums_to_sign_of_dot((q, s) in pair()) {
        let dot: f64 = q.iter().zip(&s).map(|(a, b)| a * b).sum();
        prop_assume!(dot.abs() > 1e-6);
        let w = contribution_weights(&query(&q), &support(&s)).unwrap();
        prop_assert!((w.sum() - dot.signum()).abs() < 1e-9);
    }

    #[test]
    fn omega_is_odd_and_scale_invariant((q, s) in pair(), c in 0.01f64..100.0) {
        let dot: f64 = q.iter().zip(&s).map(|(a, b)| a * b).sum();
        prop_assume!(dot.abs() > 1e-6);
        let (fq, fs) = (query(&q), support(&s));
        let w = contribution_weights(&fq, &fs).unwrap();
        let neg = contribution_weights(&fq.scaled(-1.0).unwrap(), &fs).unwrap();
        for (a, b) in neg.omega.iter().zip(&w.omega) {
            prop_assert_eq!(*a, -*b);
        }
        let scaled = contribution_weights(&fq, &fs.scaled(c).unwrap()).unwrap();
        let big = w.omega.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        let err = max_abs_diff(&scaled.omega, &w.omega) / (big * w.condition().max(1.0));
        prop_assert!(err < 1e-12, "{}", err);
    }

    #[test]
    fn cosine_is_bounded_and_symmetric((q, s) in pair()) {
        let (a, b) = (query(&q), support(&s));
        match (cosine_similarity(&a, &b), cosine_similarity(&b, &a)) {
            (Ok(x), Ok(y)) => {
                prop_assert!((-1.0..=1.0).contains(&x));
                prop_assert_eq!(x, y);
            }
            (Err(Error::ZeroVector), Err(Error::ZeroVector)) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }
}

#[test]
fn mismatched_lengths_are_rejected() {
    assert!(matches!(
        contribution_weights(&query(&[1.0, 2.0]), &support(&[1.0])),
        Err(Error::ShapeMismatch(_))
    ));
}
