//! Frozen-upstream probes: a trainable softmax-weighted sum over every
//! representation an encoder exposes, feeding one affine classifier.
//!
//! Representations are named `feat` (projected front-end), `layer_<i>` for
//! intermediate transformer layers, `hid` (last transformer layer, shared by
//! all heads) and `head_<l>` for each prediction head. Frames are mean-pooled
//! per utterance before the weighted sum; both operations are linear, so the
//! order does not change the result and pooling first keeps the probe cheap.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::exec::BatchExecutor;
use crate::graph::{Graph, Var};
use crate::model::{Encoder, FeatureMap};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, SplitMix64};
use crate::synth::{is_heldout, Corpus, UtteranceRecord};
use crate::tensor::{Element, Tensor};

const CLASSIFIER_KEY: u64 = 0x434c53;
const SHUFFLE_KEY: u64 = 0x534846;

/// One logit per summarized representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryWeights {
    pub logits: Vec<f64>,
}

impl SummaryWeights {
    pub fn uniform(k: usize) -> Self {
        Self { logits: vec![0.0; k] }
    }

    pub fn softmax(&self) -> Vec<f64> {
        let m = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|&l| libm::exp(l - m)).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

/// `sum_i softmax(logits)_i * frames_i`.
pub fn weighted_sum<F: Element>(features: &[FeatureMap<F>], weights: &SummaryWeights) -> Result<FeatureMap<F>> {
    let first = features
        .first()
        .ok_or_else(|| shape_err("weighted_sum", "at least one feature map", &[0]))?;
    if weights.logits.len() != features.len() {
        return Err(shape_err(
            "weighted_sum",
            format!("{} logits", features.len()),
            &[weights.logits.len()],
        ));
    }
    let shape = first.frames.shape();
    if let Some(f) = features.iter().find(|f| f.frames.shape() != shape) {
        return Err(shape_err("weighted_sum", format!("{shape:?}"), f.frames.shape()));
    }
    let w = weights.softmax();
    let mut out = vec![0.0f64; first.frames.len()];
    for (f, &wi) in features.iter().zip(&w) {
        for (o, &v) in out.iter_mut().zip(f.frames.data()) {
            *o += wi * v.to_f64();
        }
    }
    Ok(FeatureMap {
        frames: Tensor::new(shape.to_vec(), out.into_iter().map(F::from_f64).collect())?,
        layer_index: first.layer_index,
    })
}

/// Differentiable weighted sum of equally shaped nodes; `logits` is `[1, k]`.
pub fn weighted_sum_graph<F: Element>(g: &mut Graph<F>, inputs: &[Var], logits: Var) -> Result<Var> {
    if g.shape(logits) != [1, inputs.len()] {
        return Err(shape_err(
            "weighted_sum",
            format!("[1, {}]", inputs.len()),
            g.shape(logits),
        ));
    }
    let w = g.softmax(logits);
    let mut acc: Option<Var> = None;
    for (i, &x) in inputs.iter().enumerate() {
        let wi = g.slice(w, 1, i, i + 1)?;
        let term = g.mul_scalar(x, wi)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| shape_err("weighted_sum", "at least one input", &[0]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Speaker,
    Content,
    Intent,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Speaker, TaskKind::Content, TaskKind::Intent];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Speaker => "speaker",
            TaskKind::Content => "content",
            TaskKind::Intent => "intent",
        }
    }

    pub fn label(self, r: &UtteranceRecord) -> usize {
        match self {
            TaskKind::Speaker => r.speaker,
            TaskKind::Content => r.content,
            TaskKind::Intent => r.intent,
        }
    }
}

impl core::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown task {s:?}; expected speaker, content or intent")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTask {
    pub kind: TaskKind,
    pub arity: usize,
}

impl ProbeTask {
    /// Reads the label arity off the corpus; fewer than two distinct labels
    /// means the task is absent.
    pub fn for_corpus(kind: TaskKind, corpus: &Corpus) -> Result<Self> {
        let arity = corpus.records.iter().map(|r| kind.label(r) + 1).max().unwrap_or(0);
        if arity < 2 {
            return Err(Error::Data(format!(
                "corpus has no {} labels to probe (arity {arity})",
                kind.name()
            )));
        }
        Ok(Self { kind, arity })
    }

    pub fn chance(&self) -> f64 {
        1.0 / self.arity as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Control run: labels are permuted across utterances.
    pub shuffle_labels: bool,
    /// Z-score every pooled dimension with training-split statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-3,
            seed: 0,
            shuffle_labels: false,
            standardize: false,
        }
    }
}

/// Mean-pooled representations of every utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    pub names: Vec<String>,
    pub dim: usize,
    /// `pooled[utterance][representation]` is a `dim`-vector.
    pub pooled: Vec<Vec<Vec<f64>>>,
    /// Frame-level ℓ2 norm of each representation averaged over the corpus.
    pub mean_norms: Vec<f64>,
    pub has_heads: bool,
}

pub fn representation_names(num_layers: usize, heads: &[usize]) -> Vec<String> {
    let mut names = vec!["feat".to_string()];
    for i in 1..num_layers {
        names.push(format!("layer_{i}"));
    }
    if num_layers > 0 {
        names.push("hid".to_string());
    }
    names.extend(heads.iter().map(|l| format!("head_{l}")));
    names
}

/// Runs the frozen `upstream` over the whole corpus.
pub fn extract_pooled<F, E>(upstream: &Encoder<F>, corpus: &Corpus, exec: &E) -> Result<PooledFeatures>
where
    F: Element + Send + Sync,
    E: BatchExecutor,
{
    if corpus.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let per = exec.map(&idx, |&i| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let wave: Vec<F> = corpus.audio(i).iter().map(|&v| F::from_f64(f64::from(v))).collect();
        let feats = upstream.forward_all_layers(&wave)?;
        let maps = feats.layers.iter().chain(&feats.heads);
        let mut pooled = Vec::new();
        let mut norms = Vec::new();
        for m in maps {
            let (t, d) = (m.num_frames(), m.dim());
            let mut mean = vec![0.0; d];
            let mut norm = 0.0;
            for row in m.frames.data().chunks_exact(d) {
                let mut sq = 0.0;
                for (o, &v) in mean.iter_mut().zip(row) {
                    let v = v.to_f64();
                    *o += v;
                    sq += v * v;
                }
                norm += libm::sqrt(sq);
            }
            mean.iter_mut().for_each(|v| *v /= t as f64);
            pooled.push(mean);
            norms.push(norm / t as f64);
        }
        Ok((pooled, norms))
    });
    let cfg = upstream.config();
    let heads: Vec<usize> = cfg.head_layers.clone().unwrap_or_default();
    let names = representation_names(cfg.num_transformer_layers, &heads);
    let mut pooled = Vec::with_capacity(per.len());
    let mut mean_norms = vec![0.0; names.len()];
    for r in per {
        let (p, n) = r?;
        for (m, v) in mean_norms.iter_mut().zip(n) {
            *m += v;
        }
        pooled.push(p);
    }
    mean_norms.iter_mut().for_each(|m| *m /= corpus.len() as f64);
    Ok(PooledFeatures {
        names,
        dim: cfg.post_conv_dim,
        pooled,
        mean_norms,
        has_heads: !heads.is_empty(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: TaskKind,
    /// Held-out accuracy in [0, 1].
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub steps: usize,
    pub seed: u64,
    pub shuffled: bool,
    pub representations: Vec<String>,
    /// Learned summary weights after softmax.
    pub weights: Vec<f64>,
}

/// Per-dimension `(mean, 1 / std)` of one representation over `ids`.
fn moments(features: &PooledFeatures, ids: &[usize], rep: usize) -> Vec<(f64, f64)> {
    let n = ids.len() as f64;
    (0..features.dim)
        .map(|j| {
            let mean = ids.iter().map(|&i| features.pooled[i][rep][j]).sum::<f64>() / n;
            let var = ids
                .iter()
                .map(|&i| {
                    let d = features.pooled[i][rep][j] - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            (mean, 1.0 / libm::sqrt(var + 1e-12))
        })
        .collect()
}

fn stack(features: &PooledFeatures, ids: &[usize], rep: usize, norm: Option<&[(f64, f64)]>) -> Result<Tensor<f64>> {
    let mut data = Vec::with_capacity(ids.len() * features.dim);
    for &i in ids {
        let v = &features.pooled[i][rep];
        match norm {
            Some(m) => data.extend(v.iter().zip(m).map(|(x, (mu, inv))| (x - mu) * inv)),
            None => data.extend_from_slice(v),
        }
    }
    Tensor::new(vec![ids.len(), features.dim], data)
}

fn one_hot(labels: &[usize], arity: usize) -> Result<Tensor<f64>> {
    let mut data = vec![0.0; labels.len() * arity];
    for (r, &l) in labels.iter().enumerate() {
        data[r * arity + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), arity], data)
}

/// Full-batch Adam on the summary logits and an affine classifier over the
/// training split; reports accuracy on the held-out split.
pub fn train_probe(
    features: &PooledFeatures,
    corpus: &Corpus,
    task: &ProbeTask,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if features.pooled.len() != corpus.len() {
        return Err(Error::Data(format!(
            "{} pooled utterances for a corpus of {}",
            features.pooled.len(),
            corpus.len()
        )));
    }
    if cfg.steps == 0 || !cfg.lr.is_finite() || cfg.lr <= 0.0 {
        return Err(Error::Parameter("probe needs steps >= 1 and lr > 0".into()));
    }
    let mut labels: Vec<usize> = corpus.records.iter().map(|r| task.kind.label(r)).collect();
    if labels.iter().any(|&l| l >= task.arity) {
        return Err(Error::Data(format!("{} label outside 0..{}", task.kind.name(), task.arity)));
    }
    if cfg.shuffle_labels {
        SplitMix64::new(derive_seed(cfg.seed, &[SHUFFLE_KEY])).shuffle(&mut labels);
    }
    let (train, test): (Vec<usize>, Vec<usize>) = (0..corpus.len()).partition(|&i| !is_heldout(corpus.records[i].id));
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("corpus too small for an 80/20 split".into()));
    }

    let k = features.names.len();
    let d = features.dim;
    let c = task.arity;
    let norms: Vec<Option<Vec<(f64, f64)>>> = (0..k)
        .map(|r| cfg.standardize.then(|| moments(features, &train, r)))
        .collect();
    let stacked = |ids: &[usize]| -> Result<Vec<Tensor<f64>>> {
        (0..k).map(|r| stack(features, ids, r, norms[r].as_deref())).collect()
    };
    let train_x = stacked(&train)?;
    let test_x = stacked(&test)?;
    let label_of = |ids: &[usize]| ids.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let train_y = label_of(&train);
    let test_y = label_of(&test);
    let train_onehot = one_hot(&train_y, c)?;

    let mut rng = SplitMix64::new(derive_seed(cfg.seed, &[CLASSIFIER_KEY, task.kind as u64]));
    let std = 1.0 / libm::sqrt(d as f64);
    let w0: Vec<f64> = (0..d * c).map(|_| std * rng.normal()).collect();
    let mut params: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    params.insert("summary.logits".into(), Tensor::zeros(&[1, k]));
    params.insert("classifier.weight".into(), Tensor::new(vec![d, c], w0)?);
    params.insert("classifier.bias".into(), Tensor::zeros(&[c]));

    let forward = |g: &mut Graph<f64>, p: &BTreeMap<String, Tensor<f64>>, xs: &[Tensor<f64>], train: bool| -> Result<(Var, Vec<Var>)> {
        let leaves: Vec<Var> = ["summary.logits", "classifier.weight", "classifier.bias"]
            .iter()
            .map(|n| g.leaf(p[*n].clone(), train))
            .collect();
        let inputs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let h = weighted_sum_graph(g, &inputs, leaves[0])?;
        let z = g.matmul(h, leaves[1])?;
        let z = g.bias_add(z, leaves[2])?;
        Ok((z, leaves))
    };

    let mut adam = Adam::new(AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    let names = ["summary.logits", "classifier.weight", "classifier.bias"];
    let n = train.len() as f64;
    for step in 1..=cfg.steps {
        let mut g = Graph::new();
        let (z, leaves) = forward(&mut g, &params, &train_x, true)?;
        let ls = g.log_softmax(z);
        let y = g.constant(train_onehot.clone());
        let picked = g.mul(ls, y)?;
        let s = g.sum(picked);
        let loss = g.scale(s, -1.0 / n);
        if !g.value(loss).data()[0].is_finite() {
            return Err(Error::NonFinite {
                what: format!("{} probe loss", task.kind.name()),
                step,
            });
        }
        g.backward(loss)?;
        let grads: BTreeMap<String, Tensor<f64>> = names
            .iter()
            .zip(&leaves)
            .filter_map(|(n, &v)| g.grad(v).map(|t| (n.to_string(), t.clone())))
            .collect();
        adam.step(&mut params, &grads, cfg.lr)?;
    }

    let accuracy_on = |xs: &[Tensor<f64>], ys: &[usize]| -> Result<f64> {
        let mut g = Graph::new();
        let (z, _) = forward(&mut g, &params, xs, false)?;
        let logits = g.value(z);
        let hits = logits
            .data()
            .chunks_exact(c)
            .zip(ys)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        Ok(hits as f64 / ys.len() as f64)
    };
    Ok(ProbeResult {
        task: task.kind,
        accuracy: accuracy_on(&test_x, &test_y)?,
        train_accuracy: accuracy_on(&train_x, &train_y)?,
        steps: cfg.steps,
        seed: cfg.seed,
        shuffled: cfg.shuffle_labels,
        representations: features.names.clone(),
        weights: SummaryWeights {
            logits: params["summary.logits"].data().to_vec(),
        }
        .softmax(),
    })
}

/// Index of the largest entry; the first one wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// How learned weights are combined with representation norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMode {
    /// `w_i * norm_i`, renormalized.
    #[default]
    MultiplyNorm,
    /// `w_i / norm_i`, renormalized.
    DivideNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskImportance {
    pub task: TaskKind,
    /// `(representation, importance)`; importances sum to 1.
    pub rows: Vec<(String, f64)>,
}

/// Normalized importance of each representation given softmax weights and
/// mean norms.
pub fn importance(weights: &[f64], norms: &[f64], mode: ImportanceMode) -> Result<Vec<f64>> {
    if weights.len() != norms.len() || weights.is_empty() {
        return Err(shape_err("importance", format!("{} norms", weights.len()), &[norms.len()]));
    }
    let raw: Vec<f64> = weights
        .iter()
        .zip(norms)
        .map(|(&w, &n)| match mode {
            ImportanceMode::MultiplyNorm => w * n,
            ImportanceMode::DivideNorm => w / n.max(f64::MIN_POSITIVE),
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::NonFinite {
            what: "importance normalizer".into(),
            step: 0,
        });
    }
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Trains one probe per task on an upstream that still carries its heads
/// and converts the learned weights into importances.
pub fn analyze_layer_weights<F, E>(
    upstream: &Encoder<F>,
    tasks: &[TaskKind],
    corpus: &Corpus,
    cfg: &ProbeConfig,
    mode: ImportanceMode,
    exec: &E,
) -> Result<Vec<TaskImportance>>
where
    F: Element + Send + Sync,
    E: BatchExecutor,
{
    if upstream.config().num_heads() == 0 {
        return Err(Error::Protocol(
            "layer-weight analysis needs an upstream that keeps its prediction heads; \
             distill with every teacher layer predicted and skip strip-heads"
                .into(),
        ));
    }
    let features = extract_pooled(upstream, corpus, exec)?;
    importance_from_features(&features, tasks, corpus, cfg, mode)
}

pub fn importance_from_features(
    features: &PooledFeatures,
    tasks: &[TaskKind],
    corpus: &Corpus,
    cfg: &ProbeConfig,
    mode: ImportanceMode,
) -> Result<Vec<TaskImportance>> {
    tasks
        .iter()
        .map(|&kind| {
            let task = ProbeTask::for_corpus(kind, corpus)?;
            let res = train_probe(features, corpus, &task, cfg)?;
            let imp = importance(&res.weights, &features.mean_norms, mode)?;
            Ok(TaskImportance {
                task: kind,
                rows: features.names.iter().cloned().zip(imp).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(data: &[f64]) -> FeatureMap<f64> {
        FeatureMap {
            frames: Tensor::from_f64_slice(&[2, 2], data).unwrap(),
            layer_index: 0,
        }
    }

    #[test]
    fn uniform_logits_average() {
        let out = weighted_sum(&[fm(&[1.0, 2.0, 3.0, 4.0]), fm(&[3.0, 2.0, 1.0, 0.0])], &SummaryWeights::uniform(2)).unwrap();
        assert_eq!(out.frames.data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn saturated_logit_selects_one_map() {
        let w = SummaryWeights {
            logits: vec![0.0, 1e4, 0.0],
        };
        let maps = [fm(&[9.0; 4]), fm(&[1.0, -2.0, 3.0, -4.0]), fm(&[7.0; 4])];
        let out = weighted_sum(&maps, &w).unwrap();
        for (a, b) in out.frames.data().iter().zip(maps[1].frames.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn closed_form_weights() {
        let w = SummaryWeights {
            logits: vec![0.0, libm::log(3.0)],
        }
        .softmax();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn mismatches_are_shape_errors() {
        let a = fm(&[0.0; 4]);
        let b = FeatureMap {
            frames: Tensor::<f64>::zeros(&[3, 2]),
            layer_index: 1,
        };
        assert!(matches!(weighted_sum(&[a.clone(), b], &SummaryWeights::uniform(2)), Err(Error::Shape { .. })));
        assert!(matches!(weighted_sum(&[a], &SummaryWeights::uniform(2)), Err(Error::Shape { .. })));
    }

    #[test]
    fn single_representation_importance_is_one() {
        assert_eq!(importance(&[1.0], &[3.7], ImportanceMode::MultiplyNorm).unwrap(), vec![1.0]);
    }

    #[test]
    fn importance_modes() {
        let m = importance(&[0.5, 0.5], &[1.0, 3.0], ImportanceMode::MultiplyNorm).unwrap();
        assert!((m[0] - 0.25).abs() < 1e-12);
        let d = importance(&[0.5, 0.5], &[1.0, 3.0], ImportanceMode::DivideNorm).unwrap();
        assert!((d[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn names_mark_feat_and_hid() {
        assert_eq!(
            representation_names(2, &[2]),
            vec!["feat", "layer_1", "hid", "head_2"]
        );
    }
}
