//! Teacher and student encoders: a strided convolutional waveform front-end,
//! a linear projection to the model width, a convolutional positional
//! embedding, a post-norm transformer stack and optional prediction heads.
//!
//! Layer numbering: layer 0 is the projected front-end output, layer `l`
//! (1-based) is the output of transformer block `l` after its final
//! residual + layer norm. Heads read the last layer (the shared
//! representation) and each regresses one teacher layer.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::{derive_seed, fnv1a, SplitMix64};
use crate::tensor::{BitPattern, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayer {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub conv_layers: Vec<ConvLayer>,
    /// Model width D.
    pub post_conv_dim: usize,
    pub num_transformer_layers: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    /// Teacher layers regressed by prediction heads, ascending.
    #[serde(default)]
    pub head_layers: Option<Vec<usize>>,
}

/// The 7-layer strided front-end shared by every preset, with `channels`
/// output channels per layer. Kernels 10,3,3,3,3,2,2 and strides 5,2,2,2,2,2,2
/// give a 400-sample receptive field and a 320-sample hop.
pub fn standard_frontend(channels: usize) -> Vec<ConvLayer> {
    let mut v = vec![ConvLayer::new(channels, 10, 5)];
    v.extend(core::iter::repeat_n(ConvLayer::new(channels, 3, 2), 4));
    v.extend(core::iter::repeat_n(ConvLayer::new(channels, 2, 2), 2));
    v
}

impl EncoderConfig {
    /// Full-size teacher: 512-channel front-end, D = 768, 12 layers.
    pub fn base_teacher() -> Self {
        Self {
            conv_layers: standard_frontend(512),
            post_conv_dim: 768,
            num_transformer_layers: 12,
            attention_heads: 12,
            ffn_dim: 3072,
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
            head_layers: None,
        }
    }

    /// Full-size two-layer student, optionally with prediction heads.
    pub fn base_student(head_layers: Option<Vec<usize>>) -> Self {
        Self {
            num_transformer_layers: 2,
            head_layers,
            ..Self::base_teacher()
        }
    }

    /// Laptop-scale teacher: 32-channel front-end, D = 64.
    pub fn desk_teacher(layers: usize) -> Self {
        Self {
            conv_layers: standard_frontend(32),
            post_conv_dim: 64,
            num_transformer_layers: layers,
            attention_heads: 4,
            ffn_dim: 256,
            pos_conv_kernel: 16,
            pos_conv_groups: 4,
            head_layers: None,
        }
    }

    pub fn desk_student(head_layers: Option<Vec<usize>>) -> Self {
        Self {
            num_transformer_layers: 2,
            head_layers,
            ..Self::desk_teacher(2)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.conv_layers.is_empty() {
            return bad("at least one conv layer is required".into());
        }
        for (i, c) in self.conv_layers.iter().enumerate() {
            if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                return bad(format!("conv layer {i} has a zero channel/kernel/stride: {c:?}"));
            }
        }
        let d = self.post_conv_dim;
        if d == 0 || self.attention_heads == 0 || self.ffn_dim == 0 {
            return bad("post_conv_dim, attention_heads and ffn_dim must be >= 1".into());
        }
        if !d.is_multiple_of(self.attention_heads) {
            return bad(format!(
                "post_conv_dim {d} is not divisible by attention_heads {}",
                self.attention_heads
            ));
        }
        if self.pos_conv_kernel == 0 || self.pos_conv_groups == 0 || !d.is_multiple_of(self.pos_conv_groups) {
            return bad(format!(
                "positional conv (kernel {}, groups {}) incompatible with width {d}",
                self.pos_conv_kernel, self.pos_conv_groups
            ));
        }
        if let Some(h) = &self.head_layers {
            if h.is_empty() {
                return bad("head_layers is present but empty".into());
            }
            if h.contains(&0) {
                return bad("head layer indices are 1-based".into());
            }
            if h.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("head layers must be distinct and ascending: {h:?}"));
            }
        }
        Ok(())
    }

    pub fn conv_channels(&self) -> usize {
        self.conv_layers.last().map_or(0, |c| c.out_channels)
    }

    /// Minimum number of input samples that yields one frame.
    pub fn receptive_field(&self) -> usize {
        self.conv_layers
            .iter()
            .rev()
            .fold(1, |r, c| (r - 1) * c.stride + c.kernel)
    }

    /// Frames produced from `samples` input samples, or `None` when the
    /// input is shorter than the receptive field.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        self.conv_layers.iter().try_fold(samples, |len, c| {
            (len >= c.kernel).then(|| (len - c.kernel) / c.stride + 1)
        })
    }

    pub fn num_heads(&self) -> usize {
        self.head_layers.as_ref().map_or(0, Vec::len)
    }

    pub fn without_heads(&self) -> Self {
        Self {
            head_layers: None,
            ..self.clone()
        }
    }
}

/// A `T x D` sequence of frame vectors from one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F> {
    pub frames: Tensor<F>,
    /// 0 for the projected front-end; for head outputs, the teacher layer
    /// the head predicts.
    pub layer_index: usize,
}

impl<F: Element> FeatureMap<F> {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Every layer output plus head predictions of one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderFeatures<F> {
    pub layers: Vec<FeatureMap<F>>,
    pub heads: Vec<FeatureMap<F>>,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub layers: Vec<Var>,
    /// `(teacher layer, prediction)` in ascending teacher-layer order.
    pub heads: Vec<(usize, Var)>,
}

/// Which parameters become gradient-carrying leaves when bound to a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    All,
    AllExcept(Vec<String>),
}

impl Trainable {
    pub fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::All => true,
            Trainable::AllExcept(prefixes) => !prefixes.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Parameter leaves created while building a graph, by name.
pub struct Bindings {
    trainable: Trainable,
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn new(trainable: Trainable) -> Self {
        Self {
            trainable,
            vars: BTreeMap::new(),
        }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

/// Prefix of the convolutional front-end parameters.
pub const FRONTEND_PREFIX: &str = "frontend.";
pub const HEAD_PREFIX: &str = "heads.";

#[derive(Debug, Clone)]
pub struct Encoder<F> {
    config: EncoderConfig,
    params: BTreeMap<String, Tensor<F>>,
    frozen: bool,
}

enum Init {
    Ones,
    Zeros,
    Normal(f64),
}

fn param_specs(config: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut v = Vec::new();
    let mut c_in = 1;
    for (i, c) in config.conv_layers.iter().enumerate() {
        let std = libm::sqrt(2.0 / (c_in * c.kernel) as f64);
        v.push((
            format!("frontend.conv.{i}.weight"),
            vec![c.out_channels, c.kernel, c_in],
            Init::Normal(std),
        ));
        if i == 0 {
            v.push(("frontend.norm.weight".into(), vec![c.out_channels], Init::Ones));
            v.push(("frontend.norm.bias".into(), vec![c.out_channels], Init::Zeros));
        }
        c_in = c.out_channels;
    }
    let d = config.post_conv_dim;
    let linear = |v: &mut Vec<(String, Vec<usize>, Init)>, name: String, i: usize, o: usize| {
        let std = 1.0 / libm::sqrt(i as f64);
        v.push((format!("{name}.weight"), vec![i, o], Init::Normal(std)));
        v.push((format!("{name}.bias"), vec![o], Init::Zeros));
    };
    let norm = |v: &mut Vec<(String, Vec<usize>, Init)>, name: String, n: usize| {
        v.push((format!("{name}.weight"), vec![n], Init::Ones));
        v.push((format!("{name}.bias"), vec![n], Init::Zeros));
    };
    norm(&mut v, "proj.norm".into(), c_in);
    linear(&mut v, "proj".into(), c_in, d);
    let k = config.pos_conv_kernel;
    v.push((
        "pos_conv.weight".into(),
        vec![d, k, d / config.pos_conv_groups],
        Init::Normal(libm::sqrt(4.0 / (k * d) as f64)),
    ));
    v.push(("pos_conv.bias".into(), vec![d], Init::Zeros));
    norm(&mut v, "encoder.norm".into(), d);
    for l in 1..=config.num_transformer_layers {
        for p in ["q", "k", "v", "out"] {
            linear(&mut v, format!("layers.{l}.attn.{p}"), d, d);
        }
        norm(&mut v, format!("layers.{l}.attn_norm"), d);
        linear(&mut v, format!("layers.{l}.ffn.fc1"), d, config.ffn_dim);
        linear(&mut v, format!("layers.{l}.ffn.fc2"), config.ffn_dim, d);
        norm(&mut v, format!("layers.{l}.final_norm"), d);
    }
    for &h in config.head_layers.iter().flatten() {
        linear(&mut v, format!("heads.{h}.fc1"), d, d);
        linear(&mut v, format!("heads.{h}.fc2"), d, d);
    }
    v
}

fn init_tensor<F: Element>(name: &str, shape: &[usize], init: &Init, seed: u64) -> Tensor<F> {
    match *init {
        Init::Ones => Tensor::ones(shape),
        Init::Zeros => Tensor::zeros(shape),
        Init::Normal(std) => {
            let mut rng = SplitMix64::new(derive_seed(seed, &[fnv1a(name.as_bytes())]));
            let n = shape.iter().product();
            let data = (0..n).map(|_| F::from_f64(std * rng.normal())).collect();
            Tensor::new(shape.to_vec(), data).expect("parameter shapes are positive")
        }
    }
}

/// Expected parameter names and shapes for `config`, in archive order.
pub fn param_shapes(config: &EncoderConfig) -> Result<Vec<(String, Vec<usize>)>> {
    config.validate()?;
    Ok(param_specs(config).into_iter().map(|(n, s, _)| (n, s)).collect())
}

/// Checks externally produced weights against `config` by name and shape
/// only. This is the whole of checkpoint conversion support: values are never
/// read, so a foreign archive can be vetted before any tensor is copied.
pub fn check_shapes(config: &EncoderConfig, shapes: &BTreeMap<&str, &[usize]>) -> Result<()> {
    let specs = param_shapes(config)?;
    let mut bad: Vec<String> = specs
        .iter()
        .filter(|(n, s)| shapes.get(n.as_str()) != Some(&s.as_slice()))
        .map(|(n, _)| n.clone())
        .collect();
    bad.extend(shapes.keys().filter(|k| !specs.iter().any(|(n, _)| n == *k)).map(|k| k.to_string()));
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible { names: bad })
    }
}

impl<F: Element> Encoder<F> {
    /// Deterministic initialization: every parameter draws from its own
    /// substream keyed by `(seed, name)`, so adding or removing heads never
    /// perturbs the other parameters.
    pub fn build(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = param_specs(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = init_tensor(&name, &shape, &init, seed);
                (name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
            frozen: false,
        })
    }

    /// Reassembles an encoder from named tensors, checking that the set of
    /// names and every shape matches `config`.
    pub fn from_params(config: EncoderConfig, params: BTreeMap<String, Tensor<F>>) -> Result<Self> {
        let shapes: BTreeMap<&str, &[usize]> = params.iter().map(|(n, t)| (n.as_str(), t.shape())).collect();
        check_shapes(&config, &shapes)?;
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<F>> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    /// Replaces a parameter; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(crate::error::shape_err("set_param", format!("{:?}", slot.shape()), value.shape())),
            None => Err(Error::Incompatible {
                names: vec![name.to_string()],
            }),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn cast<G: Element>(&self) -> Encoder<G> {
        Encoder {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen,
        }
    }

    /// Drops every prediction head. Returns the headless encoder and the
    /// number of scalars removed.
    pub fn strip_heads(&self) -> (Self, usize) {
        let mut params = self.params.clone();
        let mut removed = 0;
        params.retain(|name, t| {
            let head = name.starts_with(HEAD_PREFIX);
            if head {
                removed += t.len();
            }
            !head
        });
        (
            Self {
                config: self.config.without_heads(),
                params,
                frozen: self.frozen,
            },
            removed,
        )
    }

    pub fn params_bitwise_eq(&self, other: &Self) -> bool
    where
        F: BitPattern,
    {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }

    fn bind(&self, g: &mut Graph<F>, b: &mut Bindings, name: &str) -> Result<Var> {
        if let Some(&v) = b.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Incompatible {
                names: vec![name.to_string()],
            })?
            .clone();
        let v = g.leaf(t, !self.frozen && b.trainable.includes(name));
        b.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn linear(&self, g: &mut Graph<F>, b: &mut Bindings, x: Var, name: &str) -> Result<Var> {
        let w = self.bind(g, b, &format!("{name}.weight"))?;
        let bias = self.bind(g, b, &format!("{name}.bias"))?;
        let y = g.matmul(x, w)?;
        g.bias_add(y, bias)
    }

    fn norm(&self, g: &mut Graph<F>, b: &mut Bindings, x: Var, name: &str) -> Result<Var> {
        let w = self.bind(g, b, &format!("{name}.weight"))?;
        let bias = self.bind(g, b, &format!("{name}.bias"))?;
        g.layer_norm(x, w, bias)
    }

    /// Front-end activations `[T, C]` from a `[N, 1]` waveform node.
    pub fn conv_features(&self, g: &mut Graph<F>, b: &mut Bindings, wave: Var) -> Result<Var> {
        let n = g.shape(wave)[0];
        if self.config.frames_for(n).is_none() {
            return Err(Error::Length {
                op: "encoder front-end",
                got: n,
                required: self.config.receptive_field(),
            });
        }
        let mut h = wave;
        for (i, c) in self.config.conv_layers.iter().enumerate() {
            let w = self.bind(g, b, &format!("frontend.conv.{i}.weight"))?;
            h = g.conv1d(h, w, None, c.stride, 1)?;
            if i == 0 {
                let gw = self.bind(g, b, "frontend.norm.weight")?;
                let gb = self.bind(g, b, "frontend.norm.bias")?;
                h = g.group_norm(h, gw, gb, c.out_channels)?;
            }
            h = g.gelu(h);
        }
        Ok(h)
    }

    /// Everything after the front-end, starting from `[T, C]` activations.
    pub fn forward_from_conv(&self, g: &mut Graph<F>, b: &mut Bindings, conv: Var) -> Result<LayerVars> {
        let d = self.config.post_conv_dim;
        let x = self.norm(g, b, conv, "proj.norm")?;
        let x0 = self.linear(g, b, x, "proj")?;
        let mut layers = vec![x0];

        let t = g.shape(x0)[0];
        let k = self.config.pos_conv_kernel;
        let pad = k / 2;
        let mut parts = Vec::with_capacity(3);
        let zeros = (pad > 0).then(|| g.constant(Tensor::zeros(&[pad, d])));
        parts.extend(zeros);
        parts.push(x0);
        parts.extend(zeros);
        let padded = if parts.len() == 1 { x0 } else { g.concat(&parts, 0)? };
        let pw = self.bind(g, b, "pos_conv.weight")?;
        let pb = self.bind(g, b, "pos_conv.bias")?;
        let mut pos = g.conv1d(padded, pw, Some(pb), 1, self.config.pos_conv_groups)?;
        if g.shape(pos)[0] != t {
            pos = g.slice(pos, 0, 0, t)?;
        }
        let pos = g.gelu(pos);
        let x = g.add(x0, pos)?;
        let mut x = self.norm(g, b, x, "encoder.norm")?;

        for l in 1..=self.config.num_transformer_layers {
            let a = self.attention(g, b, x, l)?;
            let r = g.add(x, a)?;
            x = self.norm(g, b, r, &format!("layers.{l}.attn_norm"))?;
            let h = self.linear(g, b, x, &format!("layers.{l}.ffn.fc1"))?;
            let h = g.gelu(h);
            let h = self.linear(g, b, h, &format!("layers.{l}.ffn.fc2"))?;
            let r = g.add(x, h)?;
            x = self.norm(g, b, r, &format!("layers.{l}.final_norm"))?;
            layers.push(x);
        }

        let hid = *layers.last().expect("layer 0 always present");
        let mut heads = Vec::new();
        for &h in self.config.head_layers.iter().flatten() {
            let y = self.linear(g, b, hid, &format!("heads.{h}.fc1"))?;
            let y = g.gelu(y);
            let y = self.linear(g, b, y, &format!("heads.{h}.fc2"))?;
            heads.push((h, y));
        }
        Ok(LayerVars { layers, heads })
    }

    fn attention(&self, g: &mut Graph<F>, b: &mut Bindings, x: Var, l: usize) -> Result<Var> {
        let d = self.config.post_conv_dim;
        let nh = self.config.attention_heads;
        let dh = d / nh;
        let q = self.linear(g, b, x, &format!("layers.{l}.attn.q"))?;
        let k = self.linear(g, b, x, &format!("layers.{l}.attn.k"))?;
        let v = self.linear(g, b, x, &format!("layers.{l}.attn.v"))?;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(nh);
        for h in 0..nh {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if nh == 1 {
                (q, k, v)
            } else {
                (g.slice(q, 1, lo, hi)?, g.slice(k, 1, lo, hi)?, g.slice(v, 1, lo, hi)?)
            };
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let p = g.softmax(s);
            outs.push(g.matmul(p, vh)?);
        }
        let o = if nh == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.linear(g, b, o, &format!("layers.{l}.attn.out"))
    }

    /// Full forward pass from a `[N, 1]` waveform node.
    pub fn forward(&self, g: &mut Graph<F>, b: &mut Bindings, wave: Var) -> Result<LayerVars> {
        let conv = self.conv_features(g, b, wave)?;
        self.forward_from_conv(g, b, conv)
    }

    /// Gradient-free forward pass over raw samples, returning layers
    /// `0..=num_transformer_layers` and every head prediction.
    pub fn forward_all_layers(&self, wave: &[F]) -> Result<EncoderFeatures<F>> {
        if wave.is_empty() {
            return Err(Error::Length {
                op: "encoder front-end",
                got: 0,
                required: self.config.receptive_field(),
            });
        }
        let mut g = Graph::new();
        let w = g.constant(Tensor::new(vec![wave.len(), 1], wave.to_vec())?);
        let mut b = Bindings::new(Trainable::Nothing);
        let out = self.forward(&mut g, &mut b, w)?;
        Ok(collect_features(&g, &out))
    }

    /// Gradient-free front-end pass, `[T, C]`.
    pub fn conv_features_of(&self, wave: &[F]) -> Result<Tensor<F>> {
        if wave.is_empty() {
            return Err(Error::Length {
                op: "encoder front-end",
                got: 0,
                required: self.config.receptive_field(),
            });
        }
        let mut g = Graph::new();
        let w = g.constant(Tensor::new(vec![wave.len(), 1], wave.to_vec())?);
        let mut b = Bindings::new(Trainable::Nothing);
        let c = self.conv_features(&mut g, &mut b, w)?;
        Ok(g.value(c).clone())
    }

    /// Gradient-free pass from cached front-end activations.
    pub fn forward_from_conv_features(&self, conv: &Tensor<F>) -> Result<EncoderFeatures<F>> {
        let mut g = Graph::new();
        let c = g.constant(conv.clone());
        let mut b = Bindings::new(Trainable::Nothing);
        let out = self.forward_from_conv(&mut g, &mut b, c)?;
        Ok(collect_features(&g, &out))
    }
}

pub fn collect_features<F: Element>(g: &Graph<F>, out: &LayerVars) -> EncoderFeatures<F> {
    EncoderFeatures {
        layers: out
            .layers
            .iter()
            .enumerate()
            .map(|(i, &v)| FeatureMap {
                frames: g.value(v).clone(),
                layer_index: i,
            })
            .collect(),
        heads: out
            .heads
            .iter()
            .map(|&(l, v)| FeatureMap {
                frames: g.value(v).clone(),
                layer_index: l,
            })
            .collect(),
    }
}

/// Analytic parameter count with a per-component breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub frontend: usize,
    pub projection: usize,
    pub pos_conv: usize,
    pub encoder_norm: usize,
    pub transformer: usize,
    pub heads: usize,
}

pub fn count_params(config: &EncoderConfig) -> Result<ParamCount> {
    config.validate()?;
    let mut frontend = 0;
    let mut c_in = 1;
    for (i, c) in config.conv_layers.iter().enumerate() {
        frontend += c.out_channels * c.kernel * c_in;
        if i == 0 {
            frontend += 2 * c.out_channels;
        }
        c_in = c.out_channels;
    }
    let d = config.post_conv_dim;
    let f = config.ffn_dim;
    let projection = 2 * c_in + c_in * d + d;
    let pos_conv = d * config.pos_conv_kernel * (d / config.pos_conv_groups) + d;
    let encoder_norm = 2 * d;
    let per_layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
    let transformer = per_layer * config.num_transformer_layers;
    let heads = config.num_heads() * 2 * (d * d + d);
    Ok(ParamCount {
        total: frontend + projection + pos_conv + encoder_norm + transformer + heads,
        frontend,
        projection,
        pos_conv,
        encoder_norm,
        transformer,
        heads,
    })
}

/// Multiply-accumulate counts of one forward pass, per term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub frames: usize,
    pub conv: Vec<u64>,
    pub projection: u64,
    pub pos_conv: u64,
    /// Q, K, V and output projections, all layers.
    pub attention_proj: u64,
    /// `QK^T` and the probability-weighted sum of values, all layers.
    pub attention_scores: u64,
    pub ffn: u64,
    pub heads: u64,
    pub total: u64,
}

impl FlopCount {
    pub fn frontend(&self) -> u64 {
        self.conv.iter().sum()
    }
}

pub fn count_flops(config: &EncoderConfig, samples: usize) -> Result<FlopCount> {
    config.validate()?;
    let mut len = samples;
    let mut c_in = 1u64;
    let mut conv = Vec::with_capacity(config.conv_layers.len());
    for c in &config.conv_layers {
        if len < c.kernel {
            return Err(Error::Length {
                op: "count_flops",
                got: samples,
                required: config.receptive_field(),
            });
        }
        len = (len - c.kernel) / c.stride + 1;
        conv.push(len as u64 * c.out_channels as u64 * c.kernel as u64 * c_in);
        c_in = c.out_channels as u64;
    }
    let t = len as u64;
    let d = config.post_conv_dim as u64;
    let f = config.ffn_dim as u64;
    let l = config.num_transformer_layers as u64;
    let projection = t * c_in * d;
    let pos_conv = t * d * config.pos_conv_kernel as u64 * (d / config.pos_conv_groups as u64);
    let attention_proj = l * 4 * t * d * d;
    let attention_scores = l * 2 * t * t * d;
    let ffn = l * 2 * t * d * f;
    let heads = config.num_heads() as u64 * 2 * t * d * d;
    let total = conv.iter().sum::<u64>() + projection + pos_conv + attention_proj + attention_scores + ffn + heads;
    Ok(FlopCount {
        frames: len,
        conv,
        projection,
        pos_conv,
        attention_proj,
        attention_scores,
        ffn,
        heads,
        total,
    })
}

/// `reference MACs / model MACs` at a common input length.
pub fn flop_ratio(reference: &EncoderConfig, model: &EncoderConfig, samples: usize) -> Result<f64> {
    let r = count_flops(reference, samples)?;
    let m = count_flops(model, samples)?;
    Ok(r.total as f64 / m.total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize, heads: Option<Vec<usize>>) -> EncoderConfig {
        EncoderConfig {
            conv_layers: vec![ConvLayer::new(4, 4, 2), ConvLayer::new(4, 3, 2)],
            post_conv_dim: 8,
            num_transformer_layers: layers,
            attention_heads: 2,
            ffn_dim: 16,
            pos_conv_kernel: 4,
            pos_conv_groups: 2,
            head_layers: heads,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let c = tiny(2, Some(vec![1, 2]));
        let a = Encoder::<f32>::build(&c, 11).unwrap();
        let b = Encoder::<f32>::build(&c, 11).unwrap();
        assert!(a.params_bitwise_eq(&b));
        let other = Encoder::<f32>::build(&c, 12).unwrap();
        assert!(!a.params_bitwise_eq(&other));
    }

    #[test]
    fn heads_do_not_perturb_backbone_init() {
        let a = Encoder::<f32>::build(&tiny(2, None), 5).unwrap();
        let b = Encoder::<f32>::build(&tiny(2, Some(vec![3])), 5).unwrap();
        for (name, t) in a.params() {
            assert!(t.bitwise_eq(b.param(name).unwrap()), "{name}");
        }
    }

    #[test]
    fn heads_not_divisible_rejected() {
        let mut c = EncoderConfig::desk_teacher(2);
        c.attention_heads = 5;
        assert!(matches!(Encoder::<f32>::build(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_head_layers_rejected() {
        assert!(tiny(2, Some(vec![2, 2])).validate().is_err());
        assert!(tiny(2, Some(vec![0])).validate().is_err());
        assert!(tiny(2, Some(vec![])).validate().is_err());
    }

    #[test]
    fn frames_for_standard_frontend() {
        let c = EncoderConfig::desk_teacher(1);
        assert_eq!(c.receptive_field(), 400);
        assert_eq!(c.frames_for(16_000), Some(49));
        assert_eq!(c.frames_for(400), Some(1));
        assert_eq!(c.frames_for(399), None);
    }

    #[test]
    fn count_matches_built_parameters() {
        for c in [
            tiny(0, None),
            tiny(1, Some(vec![1])),
            tiny(3, Some(vec![1, 2, 3])),
            EncoderConfig::desk_teacher(6),
            EncoderConfig::desk_student(Some(vec![2, 4, 6])),
        ] {
            let e = Encoder::<f32>::build(&c, 1).unwrap();
            assert_eq!(count_params(&c).unwrap().total, e.num_params(), "{c:?}");
        }
    }

    #[test]
    fn forward_returns_every_layer() {
        let c = tiny(3, Some(vec![2, 5]));
        let e = Encoder::<f64>::build(&c, 3).unwrap();
        let wave: Vec<f64> = (0..64).map(|i| libm::sin(i as f64 * 0.3)).collect();
        let out = e.forward_all_layers(&wave).unwrap();
        assert_eq!(out.layers.len(), 4);
        assert_eq!(out.heads.len(), 2);
        let t = c.frames_for(64).unwrap();
        for f in out.layers.iter().chain(&out.heads) {
            assert_eq!(f.frames.shape(), &[t, 8]);
        }
        assert_eq!(out.heads[1].layer_index, 5);
    }

    #[test]
    fn short_wave_is_length_error() {
        let c = tiny(1, None);
        let e = Encoder::<f32>::build(&c, 0).unwrap();
        let n = c.receptive_field() - 1;
        assert!(matches!(
            e.forward_all_layers(&vec![0.0; n]),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn zero_wave_gives_zero_frontend_before_affine() {
        // With zero input every conv output is zero, group norm maps zeros to
        // zero (mean 0, numerator 0) and gelu(0) = 0.
        let c = EncoderConfig::desk_teacher(1);
        let e = Encoder::<f32>::build(&c, 9).unwrap();
        let conv = e.conv_features_of(&vec![0.0; 16_000]).unwrap();
        assert!(conv.data().iter().all(|&v| v == 0.0));
        let out = e.forward_from_conv_features(&conv).unwrap();
        // proj.norm of an all-zero row is zero, proj bias is zero.
        assert!(out.layers[0].frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strip_heads_removes_exactly_head_params() {
        let c = tiny(2, Some(vec![1, 4]));
        let e = Encoder::<f32>::build(&c, 2).unwrap();
        let (s, removed) = e.strip_heads();
        assert_eq!(removed, 2 * 2 * (8 * 8 + 8));
        assert_eq!(s.num_params() + removed, e.num_params());
        assert_eq!(s.config().head_layers, None);
        let (s2, removed2) = s.strip_heads();
        assert_eq!(removed2, 0);
        assert!(s2.params_bitwise_eq(&s));
    }

    #[test]
    fn unit_conv_flops_equal_input_length() {
        let c = EncoderConfig {
            conv_layers: vec![ConvLayer::new(1, 1, 1)],
            post_conv_dim: 1,
            num_transformer_layers: 0,
            attention_heads: 1,
            ffn_dim: 1,
            pos_conv_kernel: 1,
            pos_conv_groups: 1,
            head_layers: None,
        };
        let f = count_flops(&c, 1234).unwrap();
        assert_eq!(f.conv, vec![1234]);
        assert_eq!(f.frames, 1234);
    }

    #[test]
    fn attention_term_grows_quadratically() {
        let c = EncoderConfig::desk_teacher(2);
        let a = count_flops(&c, 16_000).unwrap();
        let b = count_flops(&c, 32_000).unwrap();
        // 49 -> 99 frames
        assert_eq!(a.frames, 49);
        assert_eq!(b.frames, 99);
        let ratio_scores = b.attention_scores as f64 / a.attention_scores as f64;
        let ratio_frames = b.frames as f64 / a.frames as f64;
        assert!(ratio_scores > ratio_frames * 1.9);
        assert_eq!(b.ffn * a.frames as u64, a.ffn * b.frames as u64);
    }
}
