use std::collections::BTreeMap;
use std::path::PathBuf;

use lwkd::checkpoint::{Checkpoint, ALIGN, MAGIC};
use lwkd::digest::sha256_hex;
use lwkd::Error;
use lwkd_core::{ConvLayer, DistillSpec, Encoder, EncoderConfig, Tensor};
use proptest::prelude::*;

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden.dkd")
}

fn golden_config() -> EncoderConfig {
    EncoderConfig {
        conv_layers: vec![ConvLayer::new(2, 2, 2)],
        post_conv_dim: 4,
        num_transformer_layers: 1,
        attention_heads: 2,
        ffn_dim: 4,
        pos_conv_kernel: 2,
        pos_conv_groups: 2,
        head_layers: Some(vec![1]),
    }
}

/// Tensor `k` in name order holds `k + j / 4 - 2` at flat index `j`.
fn golden() -> Checkpoint {
    let template = Encoder::<f32>::build(&golden_config(), 0).unwrap();
    let params: BTreeMap<String, Tensor<f32>> = template
        .params()
        .iter()
        .enumerate()
        .map(|(k, (name, t))| {
            let data = (0..t.len()).map(|j| k as f32 + j as f32 / 4.0 - 2.0).collect();
            (name.clone(), Tensor::new(t.shape().to_vec(), data).unwrap())
        })
        .collect();
    let mut ckpt = Checkpoint::new(Encoder::from_params(golden_config(), params).unwrap());
    ckpt.distill = Some(DistillSpec {
        predicted_layers: vec![1],
        ..DistillSpec::default()
    });
    ckpt
}

#[test]
fn golden_fixture_matches_documented_layout() {
    if std::env::var_os("LWKD_BLESS").is_some() {
        golden().save(&fixture_path()).unwrap();
    }
    let bytes = std::fs::read(fixture_path()).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(bytes, golden().to_bytes().unwrap());
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.to_bytes().unwrap(), bytes);
    assert!(ckpt.encoder.params_bitwise_eq(&golden().encoder));
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("copy.dkd");
    Checkpoint::load(&fixture_path()).unwrap().save(&copy).unwrap();
    assert_eq!(std::fs::read(copy).unwrap(), bytes);
    let doc = std::fs::read_to_string(fixture_path().with_file_name("README.md")).unwrap();
    assert!(doc.contains(&sha256_hex(&bytes)), "fixture README is stale");
}

#[test]
fn bad_magic_is_a_format_error() {
    let mut bytes = golden().to_bytes().unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(b"DK"), Err(Error::Format(_))));
}

#[test]
fn truncation_names_the_last_tensor() {
    let ckpt = golden();
    let bytes = ckpt.to_bytes().unwrap();
    let last = ckpt.header().tensors.last().unwrap().name.clone();
    match Checkpoint::from_bytes(&bytes[..bytes.len() - 1]) {
        Err(Error::Integrity { tensor, .. }) => assert_eq!(tensor, last),
        other => panic!("{other:?}"),
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Integrity { .. })));
}

fn with_header(bytes: &[u8], edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
    let payload = &bytes[(12 + hlen).div_ceil(ALIGN) * ALIGN..];
    edit(&mut header);
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize((12 + json.len()).div_ceil(ALIGN) * ALIGN, 0);
    out.extend_from_slice(payload);
    out
}

#[test]
fn unknown_version_is_a_version_error() {
    let bytes = with_header(&golden().to_bytes().unwrap(), |h| h["format_version"] = 2.into());
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found: 2, .. })));
}

#[test]
fn overlapping_and_misaligned_entries_are_integrity_errors() {
    let bytes = golden().to_bytes().unwrap();
    let overlap = with_header(&bytes, |h| {
        let first = h["tensors"][0]["offset"].clone();
        h["tensors"][1]["offset"] = first;
    });
    assert!(matches!(Checkpoint::from_bytes(&overlap), Err(Error::Integrity { .. })));
    let misaligned = with_header(&bytes, |h| h["tensors"][1]["offset"] = (ALIGN as u64 + 4).into());
    assert!(matches!(Checkpoint::from_bytes(&misaligned), Err(Error::Integrity { .. })));
    let wrong_len = with_header(&bytes, |h| h["tensors"][0]["length"] = 4.into());
    assert!(matches!(Checkpoint::from_bytes(&wrong_len), Err(Error::Integrity { .. })));
}

#[test]
fn offsets_are_aligned_and_in_name_order() {
    let h = golden().header();
    let names: Vec<&str> = h.tensors.iter().map(|e| e.name.as_str()).collect();
    let mut sorted = names.clone();
    sorted.sort_unstable();
    assert_eq!(names, sorted);
    assert!(h.tensors.iter().all(|e| e.offset % ALIGN as u64 == 0));
    assert!(h.tensors.windows(2).all(|w| w[0].offset + w[0].length <= w[1].offset));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn save_load_is_byte_identical(layers in 1usize..3, seed in any::<u64>(), heads in any::<bool>(), frozen in any::<bool>()) {
        let mut cfg = golden_config();
        cfg.num_transformer_layers = layers;
        cfg.head_layers = heads.then(|| vec![layers]);
        let mut enc = Encoder::<f32>::build(&cfg, seed).unwrap();
        enc.set_frozen(frozen);
        let mut ckpt = Checkpoint::new(enc);
        ckpt.train_config_digest = Some(format!("{seed:016x}"));
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.header(), ckpt.header());
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
