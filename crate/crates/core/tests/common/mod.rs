#![allow(dead_code)]

use lwkd_core::synth::{generate_corpus, Corpus, SynthParams};
use lwkd_core::{ConvLayer, EncoderConfig};

pub fn small_params(seed: u64) -> SynthParams {
    SynthParams {
        seed,
        n_speakers: 4,
        n_contents: 4,
        n_intents: 2,
        utterances_per_cell: 2,
        duration_s: 0.5,
        ..SynthParams::default()
    }
}

pub fn small_corpus(seed: u64) -> Corpus {
    generate_corpus(&small_params(seed)).unwrap()
}

/// Three-layer front-end with 80x downsampling and D = 8.
pub fn tiny_config(layers: usize, heads: Option<Vec<usize>>) -> EncoderConfig {
    EncoderConfig {
        conv_layers: vec![ConvLayer::new(8, 10, 5), ConvLayer::new(8, 4, 4), ConvLayer::new(8, 4, 4)],
        post_conv_dim: 8,
        num_transformer_layers: layers,
        attention_heads: 2,
        ffn_dim: 16,
        pos_conv_kernel: 4,
        pos_conv_groups: 2,
        head_layers: heads,
    }
}
