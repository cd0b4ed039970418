//! Distillation training loop.
//!
//! The teacher is borrowed immutably and bound as constants, so no update can
//! reach it. When the front-end is frozen its activations are computed once
//! per utterance, together with the teacher's target layers, and every step
//! starts from those caches. Per-example gradients are evaluated through a
//! [`BatchExecutor`] and summed in batch order, which keeps runs bitwise
//! reproducible no matter how the executor schedules the work.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::distill::{distill_loss, head_cosines, init_student_from_teacher, DistillSpec, LossBreakdown};
use crate::error::{Error, Result};
use crate::exec::BatchExecutor;
use crate::graph::Graph;
use crate::model::{Bindings, Encoder, EncoderConfig, FeatureMap, Trainable, FRONTEND_PREFIX};
use crate::optim::{clip_global_norm, Adam, AdamConfig, LinearSchedule};
use crate::rng::derive_seed;
use crate::synth::{BatchIter, Corpus};
use crate::tensor::{Element, Tensor};

const INIT_KEY: u64 = 0x494e4954;
const BATCH_KEY: u64 = 0x42415443;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_updates: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Held-out head cosines are measured after step 1, every `eval_every`
    /// steps and after the last step. 0 disables the periodic evaluations.
    pub eval_every: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Copy front-end, projection and the lower transformer layers from the
    /// teacher before training.
    pub teacher_init: bool,
    pub freeze_frontend: bool,
    /// Restart the batch stream when an epoch ends.
    pub repeat: bool,
}

impl Default for TrainConfig {
    /// 200k updates of 24 utterances, peak 2e-4 after 7% warmup.
    fn default() -> Self {
        Self {
            total_updates: 200_000,
            batch_size: 24,
            peak_lr: 2e-4,
            warmup_fraction: 0.07,
            seed: 0,
            adam: AdamConfig::default(),
            eval_every: 1000,
            grad_clip: Some(1.0),
            teacher_init: true,
            freeze_frontend: true,
            repeat: true,
        }
    }
}

impl TrainConfig {
    /// The 2000-step, batch-8 configuration used for laptop-scale runs.
    pub fn desk() -> Self {
        Self {
            total_updates: 2000,
            batch_size: 8,
            peak_lr: 2e-3,
            eval_every: 250,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> Result<LinearSchedule> {
        LinearSchedule::new(self.total_updates, self.warmup_fraction, self.peak_lr)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::Parameter(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        self.schedule()?.lr_at(step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    /// Batch mean of the per-utterance objective.
    pub loss: LossBreakdown,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    /// `(teacher layer, mean cosine)` on the held-out batch.
    pub head_cosines: Vec<(usize, f64)>,
}

impl EvalRecord {
    pub fn mean_cosine(&self) -> f64 {
        self.head_cosines.iter().map(|c| c.1).sum::<f64>() / self.head_cosines.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub layers: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// `step,lr,loss_total,loss_l1_<l>...,loss_cos_<l>...,wall_ms`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss_total");
        for l in &self.layers {
            let _ = write!(s, ",loss_l1_{l}");
        }
        for l in &self.layers {
            let _ = write!(s, ",loss_cos_{l}");
        }
        s.push_str(",wall_ms\n");
        for r in &self.steps {
            let _ = write!(s, "{},{:e},{:e}", r.step, r.lr, r.loss.total);
            for t in &r.loss.per_layer {
                let _ = write!(s, ",{:e}", t.l1);
            }
            for t in &r.loss.per_layer {
                let _ = write!(s, ",{:e}", t.cos);
            }
            let _ = writeln!(s, ",{}", r.wall_ms);
        }
        s
    }

    /// `step,layer,cosine`
    pub fn evals_csv(&self) -> String {
        let mut s = String::from("step,layer,cosine\n");
        for e in &self.evals {
            for (l, c) in &e.head_cosines {
                let _ = writeln!(s, "{},{l},{c:e}", e.step);
            }
        }
        s
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.steps.first().map(|r| r.loss.total)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.steps.last().map(|r| r.loss.total)
    }
}

/// Side channel of the training loop: wall clock, progress and abort dumps.
pub trait TrainHooks<F> {
    /// Milliseconds since an arbitrary origin. The default keeps logs free
    /// of timing so they stay reproducible.
    fn wall_ms(&mut self) -> u64 {
        0
    }

    fn on_step(&mut self, _record: &StepRecord) {}

    fn on_eval(&mut self, _record: &EvalRecord) {}

    /// Called with the student as it was before the failing step.
    fn on_abort(&mut self, _student: &Encoder<F>, _step: u64, _error: &Error) {}
}

/// Hooks that do nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHooks;

impl<F> TrainHooks<F> for NoHooks {}

struct Cached<F> {
    conv: Option<Tensor<F>>,
    targets: Vec<FeatureMap<F>>,
}

/// Distills `teacher` into a fresh student.
///
/// The student's prediction heads are set to `spec.predicted_layers`
/// regardless of what `student_config` declares. Training draws batches from
/// the 80% training split of `corpus`; the held-out cosines use the first
/// `batch_size` utterances of the held-out split.
pub fn run_distillation<F, E, H>(
    teacher: &Encoder<F>,
    student_config: &EncoderConfig,
    spec: &DistillSpec,
    cfg: &TrainConfig,
    corpus: &Corpus,
    exec: &E,
    hooks: &mut H,
) -> Result<(Encoder<F>, TrainLog)>
where
    F: Element + Send + Sync,
    E: BatchExecutor,
    H: TrainHooks<F>,
{
    cfg.validate()?;
    spec.validate(teacher.config().num_transformer_layers)?;
    corpus.validate()?;
    let schedule = cfg.schedule()?;

    let mut config = student_config.clone();
    config.head_layers = Some(spec.predicted_layers.clone());
    if config.conv_layers != teacher.config().conv_layers {
        return Err(Error::Config("student and teacher front-ends differ".into()));
    }
    let init_seed = derive_seed(cfg.seed, &[INIT_KEY]);
    let mut student = if cfg.teacher_init {
        init_student_from_teacher(teacher, &config, init_seed)?
    } else {
        Encoder::build(&config, init_seed)?
    };
    student.set_frozen(false);

    let (train_ids, held_ids) = corpus.split();
    if held_ids.is_empty() {
        return Err(Error::Data("held-out split is empty".into()));
    }
    let held_ids: Vec<usize> = held_ids.into_iter().take(cfg.batch_size).collect();
    let mut batches = BatchIter::new(train_ids.clone(), cfg.batch_size, derive_seed(cfg.seed, &[BATCH_KEY]), cfg.repeat)
        .map_err(|e| Error::Data(format!("training split of {} utterances: {e}", train_ids.len())))?;

    let wave = |i: usize| -> Vec<F> { corpus.audio(i).iter().map(|&v| F::from_f64(f64::from(v))).collect() };
    let targets_of = |w: &[F]| -> Result<Vec<FeatureMap<F>>> {
        let feats = teacher.forward_all_layers(w)?;
        Ok(feats
            .layers
            .into_iter()
            .filter(|f| spec.predicted_layers.contains(&f.layer_index))
            .collect())
    };
    let build_cache = |&i: &usize| -> Result<Cached<F>> {
        let w = wave(i);
        Ok(Cached {
            conv: if cfg.freeze_frontend { Some(student.conv_features_of(&w)?) } else { None },
            targets: targets_of(&w)?,
        })
    };
    let mut cache: BTreeMap<usize, Cached<F>> = BTreeMap::new();
    let all: Vec<usize> = train_ids.iter().chain(&held_ids).copied().collect();
    for (i, c) in all.iter().zip(exec.map(&all, build_cache)) {
        cache.insert(*i, c?);
    }

    let trainable = if cfg.freeze_frontend {
        Trainable::AllExcept(vec![FRONTEND_PREFIX.into()])
    } else {
        Trainable::All
    };
    let mut adam = Adam::new(cfg.adam);
    let mut log = TrainLog {
        layers: spec.predicted_layers.clone(),
        ..TrainLog::default()
    };

    for step in 1..=cfg.total_updates {
        let batch = batches
            .next()
            .ok_or_else(|| Error::Data(format!("corpus exhausted at step {step} with repeat disabled")))?;
        let min_len = batch.iter().map(|&i| corpus.records[i].length).min().unwrap_or(0);

        let per_example = exec.map(&batch, |&i| {
            example_grads(&student, corpus, &cache[&i], i, min_len, spec, &trainable, &targets_of)
        });
        let mut grads: BTreeMap<String, Tensor<F>> = BTreeMap::new();
        let mut losses = Vec::with_capacity(batch.len());
        for r in per_example {
            let (g, loss) = match r {
                Ok(v) => v,
                Err(e) => {
                    hooks.on_abort(&student, step, &e);
                    return Err(e);
                }
            };
            for (name, t) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
            losses.push(loss);
        }
        let inv = F::from_f64(1.0 / batch.len() as f64);
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v * inv);
        }
        let loss = LossBreakdown::average(&losses).expect("batch is non-empty");
        if !loss.total.is_finite() {
            let e = Error::NonFinite {
                what: "distillation loss".into(),
                step: step as usize,
            };
            hooks.on_abort(&student, step, &e);
            return Err(e);
        }
        if let Some(c) = cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        let lr = schedule.lr_at(step)?;
        if let Err(e) = adam.step(student.params_mut(), &grads, lr) {
            hooks.on_abort(&student, step, &e);
            return Err(e);
        }

        let record = StepRecord {
            step,
            lr,
            loss,
            wall_ms: hooks.wall_ms(),
        };
        hooks.on_step(&record);
        log.steps.push(record);

        if step == 1 || step == cfg.total_updates || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            let eval = EvalRecord {
                step,
                head_cosines: held_out_cosines(&student, &held_ids, &cache, exec, &wave)?,
            };
            hooks.on_eval(&eval);
            log.evals.push(eval);
        }
    }
    Ok((student, log))
}

/// Maps a waveform to the teacher layers the student regresses.
type TargetFn<'a, F> = dyn Fn(&[F]) -> Result<Vec<FeatureMap<F>>> + 'a;

#[allow(clippy::too_many_arguments)]
fn example_grads<F: Element>(
    student: &Encoder<F>,
    corpus: &Corpus,
    cached: &Cached<F>,
    index: usize,
    min_len: usize,
    spec: &DistillSpec,
    trainable: &Trainable,
    targets_of: &TargetFn<'_, F>,
) -> Result<(BTreeMap<String, Tensor<F>>, LossBreakdown)> {
    let cfg = student.config();
    let full_len = corpus.records[index].length;
    let frames = cfg.frames_for(min_len).ok_or(Error::Length {
        op: "encoder front-end",
        got: min_len,
        required: cfg.receptive_field(),
    })?;
    let cropped: Option<Vec<F>> = (min_len < full_len).then(|| {
        corpus.audio(index)[..min_len]
            .iter()
            .map(|&v| F::from_f64(f64::from(v)))
            .collect()
    });

    let mut g = Graph::new();
    let mut b = Bindings::new(trainable.clone());
    let out = match &cached.conv {
        Some(conv) => {
            // A prefix of the waveform yields a prefix of the conv frames.
            let conv = if conv.rows() > frames { conv.slice_rows(0, frames)? } else { conv.clone() };
            let c = g.constant(conv);
            student.forward_from_conv(&mut g, &mut b, c)?
        }
        None => {
            let w: Vec<F> = match &cropped {
                Some(w) => w.clone(),
                None => corpus.audio(index).iter().map(|&v| F::from_f64(f64::from(v))).collect(),
            };
            let w = g.constant(Tensor::new(vec![w.len(), 1], w)?);
            student.forward(&mut g, &mut b, w)?
        }
    };
    let recomputed;
    let targets = match &cropped {
        Some(w) => {
            recomputed = targets_of(w)?;
            &recomputed
        }
        None => &cached.targets,
    };
    let teacher_vars: BTreeMap<usize, _> = targets
        .iter()
        .map(|f| (f.layer_index, g.constant(f.frames.clone())))
        .collect();
    let student_vars: BTreeMap<usize, _> = out.heads.iter().copied().collect();
    let loss = distill_loss(&mut g, &student_vars, &teacher_vars, spec)?;
    g.backward(loss.total)?;
    let breakdown = loss.breakdown(&g, spec.lambda);
    let grads = b
        .vars()
        .iter()
        .filter_map(|(name, &v)| g.grad(v).map(|t| (name.clone(), t.clone())))
        .collect();
    Ok((grads, breakdown))
}

fn held_out_cosines<F, E>(
    student: &Encoder<F>,
    ids: &[usize],
    cache: &BTreeMap<usize, Cached<F>>,
    exec: &E,
    wave: &(dyn Fn(usize) -> Vec<F> + Sync),
) -> Result<Vec<(usize, f64)>>
where
    F: Element + Send + Sync,
    E: BatchExecutor,
{
    let per = exec.map(ids, |i| -> Result<Vec<(usize, f64)>> {
        let c = &cache[i];
        let heads = match &c.conv {
            Some(conv) => student.forward_from_conv_features(conv)?.heads,
            None => student.forward_all_layers(&wave(*i))?.heads,
        };
        head_cosines(&heads, &c.targets)
    });
    let mut sums: Vec<(usize, f64)> = Vec::new();
    for r in per {
        let r = r?;
        if sums.is_empty() {
            sums = r.iter().map(|&(l, _)| (l, 0.0)).collect();
        }
        for (s, (_, c)) in sums.iter_mut().zip(r) {
            s.1 += c;
        }
    }
    let n = ids.len() as f64;
    Ok(sums.into_iter().map(|(l, s)| (l, s / n)).collect())
}
