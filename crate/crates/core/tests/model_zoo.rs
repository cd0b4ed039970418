mod common;

use common::tiny_config;
use lwkd_core::model::{check_shapes, count_flops, count_params, flop_ratio, param_shapes};
use lwkd_core::{Encoder, EncoderConfig};

const HEAD: usize = 2 * (768 * 768 + 768);

#[test]
fn reference_parameter_counts() {
    let teacher = count_params(&EncoderConfig::base_teacher()).unwrap().total;
    let student = count_params(&EncoderConfig::base_student(None)).unwrap().total;
    let three = count_params(&EncoderConfig::base_student(Some(vec![4, 8, 12]))).unwrap().total;
    let one = count_params(&EncoderConfig::base_student(Some(vec![12]))).unwrap().total;
    assert_eq!(teacher, 94_370_816);
    assert_eq!(student, 23_492_096);
    assert_eq!(HEAD, 1_181_184);
    assert_eq!(three - student, 3 * HEAD);
    assert_eq!(one - student, HEAD);
    for (got, millions) in [(teacher, 94.68), (student, 23.49), (three, 27.03), (one, 24.67)] {
        let rel = (got as f64 / 1e6 - millions).abs() / millions;
        assert!(rel <= 0.02, "{got} vs {millions}M");
    }
}

#[test]
fn analytic_count_matches_built_tensors() {
    for cfg in [
        EncoderConfig::desk_teacher(6),
        EncoderConfig::desk_student(Some(vec![2, 4, 6])),
        tiny_config(3, Some(vec![1, 3])),
    ] {
        let e = Encoder::<f32>::build(&cfg, 5).unwrap();
        assert_eq!(e.num_params(), count_params(&cfg).unwrap().total);
    }
}

#[test]
fn desk_flop_ratio_exceeds_one_and_a_half() {
    let samples = 16_000;
    let r = flop_ratio(&EncoderConfig::desk_teacher(6), &EncoderConfig::desk_student(None), samples).unwrap();
    assert!(r > 1.5, "ratio {r}");
    let t = count_flops(&EncoderConfig::desk_teacher(6), samples).unwrap();
    let s = count_flops(&EncoderConfig::desk_student(None), samples).unwrap();
    assert_eq!(t.frontend(), s.frontend());
    assert!(t.total > s.total);
}

#[test]
fn stripping_keeps_backbone_outputs_bitwise() {
    let cfg = tiny_config(2, Some(vec![1, 2]));
    let e = Encoder::<f32>::build(&cfg, 3).unwrap();
    let wave: Vec<f32> = (0..400).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    let before = e.forward_all_layers(&wave).unwrap();
    let (s, removed) = e.strip_heads();
    let after = s.forward_all_layers(&wave).unwrap();
    assert_eq!(removed, 2 * 2 * (8 * 8 + 8));
    assert_eq!(e.num_params() - s.num_params(), removed);
    assert!(after.heads.is_empty());
    for (a, b) in before.layers.iter().zip(&after.layers) {
        assert!(a.frames.bitwise_eq(&b.frames));
    }
    let (again, zero) = s.strip_heads();
    assert_eq!(zero, 0);
    assert!(again.params_bitwise_eq(&s));
}

#[test]
fn layer_outputs_have_expected_shapes() {
    let cfg = tiny_config(3, Some(vec![2]));
    let e = Encoder::<f64>::build(&cfg, 1).unwrap();
    let wave = vec![0.1; 400];
    let f = e.forward_all_layers(&wave).unwrap();
    let frames = cfg.frames_for(400).unwrap();
    assert_eq!(f.layers.len(), 4);
    assert!(f.layers.iter().all(|l| l.frames.shape() == [frames, 8]));
    assert_eq!(f.heads.len(), 1);
    assert_eq!(f.heads[0].layer_index, 2);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = tiny_config(2, Some(vec![3]));
    c.head_layers = Some(vec![]);
    assert!(Encoder::<f32>::build(&c, 0).is_err());
    let mut c = tiny_config(2, None);
    c.attention_heads = 3;
    assert!(Encoder::<f32>::build(&c, 0).is_err());
}

#[test]
fn shape_check_accepts_reference_layout_and_names_mismatches() {
    let cfg = EncoderConfig::base_teacher();
    let expected = param_shapes(&cfg).unwrap();
    let mut shapes: std::collections::BTreeMap<&str, &[usize]> =
        expected.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
    check_shapes(&cfg, &shapes).unwrap();
    let wrong = [768usize, 3];
    shapes.insert("proj.weight", &wrong);
    shapes.remove("layers.12.ffn.fc2.bias");
    shapes.insert("label_embs", &wrong);
    match check_shapes(&cfg, &shapes) {
        Err(lwkd_core::Error::Incompatible { names }) => {
            assert_eq!(names, ["proj.weight", "layers.12.ffn.fc2.bias", "label_embs"]);
        }
        other => panic!("expected incompatibility, got {other:?}"),
    }
}
