mod common;

use std::collections::BTreeMap;

use common::tiny_config;
use lwkd_core::distill::{distill_loss, distill_loss_value, head_cosines, init_student_from_teacher, validate_layer_set};
use lwkd_core::{DistillSpec, Encoder, Error, FeatureMap, Graph, Reduction, Tensor};

fn fm(layer: usize, rows: usize, cols: usize, data: &[f64]) -> FeatureMap<f64> {
    FeatureMap {
        frames: Tensor::from_f64_slice(&[rows, cols], data).unwrap(),
        layer_index: layer,
    }
}

fn spec(layers: &[usize], lambda: f64) -> DistillSpec {
    DistillSpec {
        predicted_layers: layers.to_vec(),
        lambda,
        reduction: Reduction::MeanOverTime,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn identical_frames_cost_the_cosine_floor() {
    let h = fm(4, 3, 4, &[0.5, -1.0, 2.0, 0.25, 1.0, 1.0, -1.0, 3.0, -0.5, 0.1, 0.2, 0.3]);
    let b = distill_loss_value(std::slice::from_ref(&h), std::slice::from_ref(&h), &spec(&[4], 1.0)).unwrap();
    assert!((b.total - 0.313262).abs() < 1e-6, "{}", b.total);
    assert!((b.total + sigmoid(1.0).ln()).abs() < 1e-6);
    assert_eq!(b.per_layer[0].l1, 0.0);
}

#[test]
fn orthogonal_pair_in_two_dimensions() {
    let p = fm(1, 1, 2, &[1.0, 0.0]);
    let h = fm(1, 1, 2, &[0.0, 1.0]);
    let b = distill_loss_value(&[p], &[h], &spec(&[1], 1.0)).unwrap();
    assert!((b.total - 1.693147).abs() < 1e-6, "{}", b.total);
    assert!((b.per_layer[0].l1 - 1.0).abs() < 1e-12);
    assert!((b.per_layer[0].cos - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn zero_lambda_is_mean_l1() {
    let p = fm(2, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let h = fm(2, 2, 2, &[0.0, 0.0, 1.0, 1.0]);
    let b = distill_loss_value(&[p], &[h], &spec(&[2], 0.0)).unwrap();
    // frames: (1 + 2) / 2 and (2 + 3) / 2, averaged over time
    assert!((b.total - 2.0).abs() < 1e-12);
    assert_eq!(b.per_layer[0].cos, 0.0);
}

#[test]
fn layers_add_up_and_sum_reduction_scales_by_frames() {
    let p1 = fm(1, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let p2 = fm(3, 2, 2, &[1.0, 1.0, 1.0, 1.0]);
    let h1 = fm(1, 2, 2, &[0.0, 1.0, 0.0, 1.0]);
    let h2 = fm(3, 2, 2, &[1.0, 1.0, -1.0, -1.0]);
    let mean = distill_loss_value(&[p1.clone(), p2.clone()], &[h1.clone(), h2.clone()], &spec(&[1, 3], 1.0)).unwrap();
    let one = distill_loss_value(std::slice::from_ref(&p1), std::slice::from_ref(&h1), &spec(&[1], 1.0)).unwrap();
    let three = distill_loss_value(std::slice::from_ref(&p2), std::slice::from_ref(&h2), &spec(&[3], 1.0)).unwrap();
    assert!((mean.total - one.total - three.total).abs() < 1e-12);
    let sum_spec = DistillSpec {
        reduction: Reduction::SumOverTime,
        ..spec(&[1, 3], 1.0)
    };
    let sum = distill_loss_value(&[p1, p2], &[h1, h2], &sum_spec).unwrap();
    assert!((sum.total - 2.0 * mean.total).abs() < 1e-12);
}

#[test]
fn teacher_targets_get_no_gradient() {
    let mut g: Graph<f64> = Graph::new();
    let p = g.param(Tensor::from_f64_slice(&[2, 2], &[0.3, 0.1, -0.2, 0.4]).unwrap());
    let h = g.constant(Tensor::from_f64_slice(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let loss = distill_loss(&mut g, &BTreeMap::from([(2, p)]), &BTreeMap::from([(2, h)]), &spec(&[2], 1.0)).unwrap();
    g.backward(loss.total).unwrap();
    assert!(g.grad(p).is_some());
    assert!(g.grad(h).is_none());
}

#[test]
fn layer_sets_are_validated() {
    assert!(matches!(validate_layer_set(&[0], 12), Err(Error::Spec(_))));
    assert!(matches!(validate_layer_set(&[13], 12), Err(Error::Spec(_))));
    assert!(matches!(validate_layer_set(&[], 12), Err(Error::Spec(_))));
    assert_eq!(validate_layer_set(&[12, 4, 8, 4], 12).unwrap().predicted_layers, vec![4, 8, 12]);
    assert!(spec(&[8, 4], 1.0).validate(12).is_err());
    assert!(spec(&[4], -1.0).validate(12).is_err());
}

#[test]
fn teacher_init_copies_front_end_and_first_layers() {
    let teacher = Encoder::<f32>::build(&tiny_config(4, None), 10).unwrap();
    let student = init_student_from_teacher(&teacher, &tiny_config(2, Some(vec![2, 4])), 11).unwrap();
    for (name, t) in student.params() {
        if name.starts_with("heads.") {
            continue;
        }
        assert!(t.bitwise_eq(teacher.param(name).unwrap()), "{name}");
    }
    assert!(student.params().keys().any(|n| n.starts_with("layers.2.")));
    assert!(!student.params().keys().any(|n| n.starts_with("layers.3.")));
}

#[test]
fn mismatched_shapes_are_reported_by_name() {
    let teacher = Encoder::<f32>::build(&tiny_config(4, None), 10).unwrap();
    let mut cfg = tiny_config(2, Some(vec![2]));
    cfg.ffn_dim = 32;
    match init_student_from_teacher(&teacher, &cfg, 1) {
        Err(Error::Incompatible { names }) => assert!(names.iter().any(|n| n.contains("ffn"))),
        other => panic!("{other:?}"),
    }
}

#[test]
fn cosines_of_identical_predictions_are_one() {
    let t = fm(4, 2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
    let c = head_cosines(std::slice::from_ref(&t), &[fm(2, 2, 3, &[0.0; 6]), t.clone()]).unwrap();
    assert_eq!(c.len(), 1);
    assert_eq!(c[0].0, 4);
    assert!((c[0].1 - 1.0).abs() < 1e-6);
}
