//! File-level steps behind every subcommand.
//!
//! Run directory layout:
//!
//! | file               | written by       | contents                                        |
//! |--------------------|------------------|-------------------------------------------------|
//! | `teacher.dkd`      | `distill`        | frozen teacher, unless one was passed in         |
//! | `student.dkd`      | `distill`        | student with its prediction heads               |
//! | `train_log.csv`    | `distill`        | one row per update, see [`TrainLog::to_csv`]    |
//! | `evals.csv`        | `distill`        | `step,layer,cosine` on the held-out batch       |
//! | `run.json`         | `distill`        | resolved config and loss summary                |
//! | `abort_step_<k>.dkd` | `distill`      | student before the update that failed           |
//! | `probe.csv`        | `probe`          | `task,accuracy,steps,seed,upstream,params,shuffled,train_accuracy` |
//! | `importance.csv`   | `analyze-layers` | `task,representation,importance`                |
//! | `profile.csv/.txt` | `profile`        | see [`crate::profiler`]                         |
//! | `gradcheck.csv`    | `grad-check`     | `case,shapes,max_rel_err,mean_rel_err,pass`     |
//! | `sweep.csv`        | `sweep`          | `layers,final_loss,final_cosine,<task>...`      |

use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lwkd_core::gradcheck::{run_suite, SuiteResult};
use lwkd_core::probe::{
    analyze_layer_weights, extract_pooled, train_probe, ProbeConfig, ProbeResult, ProbeTask, TaskImportance, TaskKind,
};
use lwkd_core::rng::derive_seed;
use lwkd_core::synth::{generate_corpus, Corpus};
use lwkd_core::train::{run_distillation, EvalRecord, StepRecord, TrainHooks};
use lwkd_core::{Encoder, TrainLog};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::corpus_io::{read_corpus, write_corpus};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::exec::Rayon;
use crate::profiler::{self, ProfileReport};
use crate::report;

pub const TEACHER: &str = "teacher.dkd";
pub const STUDENT: &str = "student.dkd";
pub const EVALS: &str = "evals.csv";
pub const RUN_SUMMARY: &str = "run.json";
pub const GRADCHECK: &str = "gradcheck.csv";

/// Upstream label used for the same-config random baseline in `probe.csv`.
pub const RANDOM_BASELINE: &str = "random-init";

const BASELINE_KEY: u64 = 0x52414e44;

/// Predicted-layer sets of the layer sweep.
pub const SWEEP_SETS: [&[usize]; 7] = [&[4], &[8], &[12], &[4, 8], &[4, 12], &[8, 12], &[4, 8, 12]];

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(Error::io(path))
}

/// Training side channel for the CLI: optional timing, progress on stderr
/// and a checkpoint dump when training aborts.
pub struct RunHooks {
    start: Option<Instant>,
    dump_dir: PathBuf,
    verbose: bool,
    pub dumped: Option<PathBuf>,
}

impl RunHooks {
    pub fn new(dump_dir: &Path, wall_clock: bool, verbose: bool) -> Self {
        Self {
            start: wall_clock.then(Instant::now),
            dump_dir: dump_dir.to_path_buf(),
            verbose,
            dumped: None,
        }
    }
}

impl TrainHooks<f32> for RunHooks {
    fn wall_ms(&mut self) -> u64 {
        self.start.map_or(0, |s| s.elapsed().as_millis() as u64)
    }

    fn on_step(&mut self, r: &StepRecord) {
        if self.verbose && (r.step == 1 || r.step.is_multiple_of(100)) {
            eprintln!("step {:>6}  lr {:.3e}  loss {:.4}", r.step, r.lr, r.loss.total);
        }
    }

    fn on_eval(&mut self, e: &EvalRecord) {
        if self.verbose {
            eprintln!("eval {:>6}  held-out cosine {:.4}", e.step, e.mean_cosine());
        }
    }

    fn on_abort(&mut self, student: &Encoder<f32>, step: u64, error: &lwkd_core::Error) {
        let path = self.dump_dir.join(format!("abort_step_{step}.dkd"));
        match Checkpoint::new(student.clone()).save(&path) {
            Ok(()) => {
                eprintln!("training aborted at step {step}: {error}; student saved to {}", path.display());
                self.dumped = Some(path);
            }
            Err(e) => eprintln!("training aborted at step {step}: {error}; dump failed: {e}"),
        }
    }
}

/// Reads `dir`, or generates the configured corpus when none is given.
pub fn obtain_corpus(dir: Option<&Path>, cfg: &ExperimentConfig) -> Result<Corpus> {
    match dir {
        Some(d) => read_corpus(d),
        None => Ok(generate_corpus(&cfg.corpus)?),
    }
}

pub fn gen_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<Corpus> {
    let corpus = generate_corpus(&cfg.corpus)?;
    write_corpus(out, &corpus)?;
    Ok(corpus)
}

pub fn build_teacher(cfg: &ExperimentConfig) -> Result<Encoder<f32>> {
    let mut t = Encoder::build(&cfg.teacher, cfg.teacher_seed)?;
    t.set_frozen(true);
    Ok(t)
}

pub fn load_encoder(path: &Path) -> Result<Encoder<f32>> {
    Ok(Checkpoint::load(path)?.encoder)
}

#[derive(Debug, Clone, Default)]
pub struct DistillOptions {
    pub teacher: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub wall_clock: bool,
    pub verbose: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub teacher_sha256: String,
    pub first_loss: f64,
    pub final_loss: f64,
    pub first_cosine: f64,
    pub final_cosine: f64,
}

pub struct DistillRun {
    pub student: Checkpoint,
    pub log: TrainLog,
    pub summary: RunSummary,
}

/// Distills into `out`, building and saving the teacher unless
/// `opts.teacher` names one.
pub fn distill(cfg: &ExperimentConfig, opts: &DistillOptions, out: &Path) -> Result<DistillRun> {
    let teacher = match &opts.teacher {
        Some(p) => {
            let mut t = load_encoder(p)?;
            t.set_frozen(true);
            t
        }
        None => {
            cfg.distill.validate(cfg.teacher.num_transformer_layers)?;
            build_teacher(cfg)?
        }
    };
    cfg.distill.validate(teacher.config().num_transformer_layers)?;
    cfg.train.validate()?;
    let corpus = obtain_corpus(opts.corpus.as_deref(), cfg)?;
    mkdir(out)?;
    if opts.teacher.is_none() {
        Checkpoint::new(teacher.clone()).save(&out.join(TEACHER))?;
    }
    distill_with(&teacher, &corpus, cfg, opts, out)
}

/// Distills from an in-memory teacher and corpus into `out`.
pub fn distill_with(
    teacher: &Encoder<f32>,
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    opts: &DistillOptions,
    out: &Path,
) -> Result<DistillRun> {
    mkdir(out)?;
    let teacher_hash = sha256_hex(&Checkpoint::new(teacher.clone()).to_bytes()?);
    let mut hooks = RunHooks::new(out, opts.wall_clock, opts.verbose);
    let (student, log) = run_distillation(teacher, &cfg.student, &cfg.distill, &cfg.train, corpus, &Rayon, &mut hooks)?;
    if sha256_hex(&Checkpoint::new(teacher.clone()).to_bytes()?) != teacher_hash {
        return Err(lwkd_core::Error::Protocol("teacher parameters changed during distillation".into()).into());
    }

    let log_csv = log.to_csv();
    let train_json = serde_json::to_vec(&cfg.train).map_err(Error::json("train config"))?;
    let ckpt = Checkpoint {
        encoder: student,
        distill: Some(cfg.distill.clone()),
        train_config_digest: Some(sha256_hex(&train_json)),
        log_digest: Some(sha256_hex(log_csv.as_bytes())),
    };
    ckpt.save(&out.join(STUDENT))?;
    write(&out.join(report::TRAIN_LOG), &log_csv)?;
    write(&out.join(EVALS), log.evals_csv())?;

    let cos = |e: Option<&EvalRecord>| e.map_or(f64::NAN, EvalRecord::mean_cosine);
    let summary = RunSummary {
        config: cfg.clone(),
        teacher_sha256: teacher_hash,
        first_loss: log.first_loss().unwrap_or(f64::NAN),
        final_loss: log.last_loss().unwrap_or(f64::NAN),
        first_cosine: cos(log.evals.first()),
        final_cosine: cos(log.evals.last()),
    };
    let json = serde_json::to_vec_pretty(&summary).map_err(Error::json("run summary"))?;
    write(&out.join(RUN_SUMMARY), json)?;
    Ok(DistillRun {
        student: ckpt,
        log,
        summary,
    })
}

/// Writes `input` without prediction heads to `output`; returns the number
/// of scalars removed.
pub fn strip_heads(input: &Path, output: &Path) -> Result<(Checkpoint, usize)> {
    let mut ckpt = Checkpoint::load(input)?;
    let (encoder, removed) = ckpt.encoder.strip_heads();
    ckpt.encoder = encoder;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    ckpt.save(output)?;
    Ok((ckpt, removed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub upstream: String,
    pub params: usize,
    pub result: ProbeResult,
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut s = String::from("task,accuracy,steps,seed,upstream,params,shuffled,train_accuracy\n");
    for r in rows {
        let p = &r.result;
        let _ = writeln!(
            s,
            "{},{:.6},{},{},{},{},{},{:.6}",
            p.task.name(),
            p.accuracy,
            p.steps,
            p.seed,
            r.upstream,
            r.params,
            p.shuffled,
            p.train_accuracy
        );
    }
    s
}

/// Probes one upstream on every task, each followed by its shuffled-label
/// control.
pub fn probe_upstream(
    name: &str,
    upstream: &Encoder<f32>,
    corpus: &Corpus,
    tasks: &[TaskKind],
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeRow>> {
    let features = extract_pooled(upstream, corpus, &Rayon)?;
    let mut rows = Vec::new();
    for &kind in tasks {
        let task = ProbeTask::for_corpus(kind, corpus)?;
        for shuffle in [false, true] {
            let c = ProbeConfig {
                shuffle_labels: shuffle,
                ..cfg.clone()
            };
            rows.push(ProbeRow {
                upstream: name.into(),
                params: upstream.num_params(),
                result: train_probe(&features, corpus, &task, &c)?,
            });
        }
    }
    Ok(rows)
}

/// Same-config student with fresh random weights.
pub fn random_baseline(upstream: &Encoder<f32>, seed: u64) -> Result<Encoder<f32>> {
    Ok(Encoder::build(upstream.config(), derive_seed(seed, &[BASELINE_KEY]))?)
}

#[derive(Debug, Clone, Default)]
pub struct ProbeOptions {
    pub corpus: Option<PathBuf>,
    pub tasks: Vec<TaskKind>,
    pub random_baseline: bool,
}

/// Probes the upstream checkpoint and writes `probe.csv`.
pub fn probe(upstream: &Path, cfg: &ExperimentConfig, opts: &ProbeOptions, out: &Path) -> Result<Vec<ProbeRow>> {
    let encoder = load_encoder(upstream)?;
    let corpus = obtain_corpus(opts.corpus.as_deref(), cfg)?;
    let tasks = if opts.tasks.is_empty() { TaskKind::ALL.to_vec() } else { opts.tasks.clone() };
    let name = upstream
        .file_stem()
        .map_or_else(|| "upstream".into(), |s| s.to_string_lossy().into_owned());
    let mut rows = probe_upstream(&name, &encoder, &corpus, &tasks, &cfg.probe)?;
    if opts.random_baseline {
        let random = random_baseline(&encoder, cfg.probe.seed)?;
        rows.extend(probe_upstream(RANDOM_BASELINE, &random, &corpus, &tasks, &cfg.probe)?);
    }
    mkdir(out)?;
    write(&out.join(report::PROBE), probe_csv(&rows))?;
    Ok(rows)
}

pub fn importance_csv(rows: &[TaskImportance]) -> String {
    let mut s = String::from("task,representation,importance\n");
    for t in rows {
        for (rep, v) in &t.rows {
            let _ = writeln!(s, "{},{rep},{v:.6}", t.task.name());
        }
    }
    s
}

/// Layer-weight importances of an upstream that keeps its heads; writes
/// `importance.csv`.
pub fn analyze_layers(
    upstream: &Path,
    cfg: &ExperimentConfig,
    corpus: Option<&Path>,
    tasks: &[TaskKind],
    out: &Path,
) -> Result<Vec<TaskImportance>> {
    let encoder = load_encoder(upstream)?;
    let corpus = obtain_corpus(corpus, cfg)?;
    let tasks = if tasks.is_empty() { TaskKind::ALL.to_vec() } else { tasks.to_vec() };
    let rows = analyze_layer_weights(&encoder, &tasks, &corpus, &cfg.probe, cfg.importance, &Rayon)?;
    mkdir(out)?;
    write(&out.join(report::IMPORTANCE), importance_csv(&rows))?;
    Ok(rows)
}

/// Profiles the given checkpoints, or the configured teacher and headless
/// student when none are given. Writes `profile.csv` and `profile.txt`.
pub fn profile(models: &[PathBuf], cfg: &ExperimentConfig, corpus: Option<&Path>, out: &Path) -> Result<Vec<ProfileReport>> {
    let encoders: Vec<(String, Encoder<f32>)> = if models.is_empty() {
        vec![
            ("teacher".into(), build_teacher(cfg)?),
            ("student".into(), Encoder::build(&cfg.student.without_heads(), cfg.teacher_seed)?),
        ]
    } else {
        models
            .iter()
            .map(|p| {
                let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
                Ok((name, load_encoder(p)?))
            })
            .collect::<Result<_>>()?
    };
    let corpus = obtain_corpus(corpus, cfg)?;
    let reports = profiler::profile(&encoders, &corpus, cfg.profile.runs, cfg.profile.batch)?;
    mkdir(out)?;
    write(&out.join("profile.csv"), profiler::to_csv(&reports))?;
    write(&out.join("profile.txt"), profiler::to_table(&reports))?;
    Ok(reports)
}

/// Finite-difference check of every primitive; writes `gradcheck.csv` and
/// fails when any case exceeds `tol`.
pub fn grad_check(seed: u64, shapes: usize, tol: f64, out: &Path) -> Result<Vec<SuiteResult>> {
    let results = run_suite(seed, shapes, 1e-5)?;
    let mut s = String::from("case,shapes,max_rel_err,mean_rel_err,pass\n");
    for r in &results {
        let shapes: Vec<String> = r
            .shapes
            .iter()
            .map(|sh| sh.iter().map(usize::to_string).collect::<Vec<_>>().join("x"))
            .collect();
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{}",
            r.name,
            shapes.join(";"),
            r.report.max_rel_err,
            r.report.mean_rel_err,
            r.report.passes(tol)
        );
    }
    mkdir(out)?;
    write(&out.join(GRADCHECK), s)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.report.passes(tol)).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(Error::Check(format!("gradient check above {tol:e}: {}", failed.join(", "))))
    }
}

pub fn layer_set_name(layers: &[usize]) -> String {
    layers.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub layers: Vec<usize>,
    pub final_loss: f64,
    pub final_cosine: f64,
    /// `(task, held-out accuracy)` of the headless student.
    pub accuracies: Vec<(TaskKind, f64)>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("layers,final_loss,final_cosine");
    for (t, _) in rows.first().map_or(&[][..], |r| &r.accuracies[..]) {
        let _ = write!(s, ",{}", t.name());
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{:.6},{:.6}", layer_set_name(&r.layers), r.final_loss, r.final_cosine);
        for (_, a) in &r.accuracies {
            let _ = write!(s, ",{a:.6}");
        }
        s.push('\n');
    }
    s
}

/// Distills, strips and probes one student per predicted-layer set against
/// a shared teacher and corpus. Each set gets its own subdirectory; the
/// comparison lands in `sweep.csv` and `sweep_table.txt`.
pub fn sweep(cfg: &ExperimentConfig, opts: &DistillOptions, out: &Path) -> Result<Vec<SweepRow>> {
    let teacher = match &opts.teacher {
        Some(p) => load_encoder(p)?,
        None => build_teacher(cfg)?,
    };
    let depth = teacher.config().num_transformer_layers;
    if depth < 12 {
        return Err(Error::Usage(format!("the layer sweep predicts up to layer 12; the teacher has {depth} layers")));
    }
    cfg.train.validate()?;
    let corpus = obtain_corpus(opts.corpus.as_deref(), cfg)?;
    mkdir(out)?;
    if opts.teacher.is_none() {
        Checkpoint::new(teacher.clone()).save(&out.join(TEACHER))?;
    }
    let mut rows = Vec::with_capacity(SWEEP_SETS.len());
    for set in SWEEP_SETS {
        let dir = out.join(format!("layers_{}", layer_set_name(set)));
        let mut run_cfg = cfg.clone();
        run_cfg.distill.predicted_layers = set.to_vec();
        if opts.verbose {
            eprintln!("sweep: layers {}", layer_set_name(set));
        }
        let run = distill_with(&teacher, &corpus, &run_cfg, opts, &dir)?;
        let (headless, _) = run.student.encoder.strip_heads();
        let probed = probe_upstream("student", &headless, &corpus, &TaskKind::ALL, &cfg.probe)?;
        write(&dir.join(report::PROBE), probe_csv(&probed))?;
        rows.push(SweepRow {
            layers: set.to_vec(),
            final_loss: run.summary.final_loss,
            final_cosine: run.summary.final_cosine,
            accuracies: probed
                .iter()
                .filter(|r| !r.result.shuffled)
                .map(|r| (r.result.task, r.result.accuracy))
                .collect(),
        });
    }
    let csv_path = out.join(report::SWEEP);
    write(&csv_path, sweep_csv(&rows))?;
    write(&out.join("sweep_table.txt"), report::sweep_table(&csv_path)?)?;
    Ok(rows)
}

