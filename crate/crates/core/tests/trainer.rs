mod common;

use common::{small_corpus, tiny_config};
use lwkd_core::train::{run_distillation, NoHooks, TrainHooks};
use lwkd_core::{DistillSpec, Encoder, Error, Sequential, TrainConfig};

fn quick(steps: u64) -> TrainConfig {
    TrainConfig {
        total_updates: steps,
        batch_size: 4,
        peak_lr: 2e-3,
        eval_every: 10,
        ..TrainConfig::desk()
    }
}

fn teacher() -> Encoder<f32> {
    let mut t = Encoder::build(&tiny_config(4, None), 1).unwrap();
    t.set_frozen(true);
    t
}

fn spec(layers: &[usize], lambda: f64) -> DistillSpec {
    DistillSpec {
        predicted_layers: layers.to_vec(),
        lambda,
        ..DistillSpec::default()
    }
}

#[test]
fn reference_schedule_values() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0).unwrap(), 0.0);
    assert!((cfg.lr_at(14_000).unwrap() - 2e-4).abs() < 1e-12);
    assert!((cfg.lr_at(107_000).unwrap() - 1e-4).abs() < 1e-12);
    assert!(cfg.lr_at(200_000).unwrap().abs() < 1e-12);
    assert!(cfg.lr_at(200_001).is_err());
}

#[test]
fn short_run_lowers_loss_and_raises_cosine() {
    let corpus = small_corpus(3);
    let t = teacher();
    let before = t.clone();
    let (student, log) =
        run_distillation(&t, &tiny_config(2, None), &spec(&[2, 4], 1.0), &quick(60), &corpus, &Sequential, &mut NoHooks).unwrap();
    assert!(t.params_bitwise_eq(&before));
    assert_eq!(log.steps.len(), 60);
    assert_eq!(student.config().head_layers, Some(vec![2, 4]));
    assert!(log.last_loss().unwrap() < log.first_loss().unwrap());
    let first = log.evals.first().unwrap();
    let last = log.evals.last().unwrap();
    assert_eq!((first.step, last.step), (1, 60));
    assert!(last.mean_cosine() > first.mean_cosine());
    assert!(log.steps.iter().all(|r| r.wall_ms == 0));
    for (k, r) in log.steps.iter().enumerate() {
        assert_eq!(r.lr, quick(60).lr_at(k as u64 + 1).unwrap());
    }
}

#[test]
fn runs_are_bitwise_reproducible() {
    let corpus = small_corpus(4);
    let t = teacher();
    let run = || run_distillation(&t, &tiny_config(2, None), &spec(&[4], 1.0), &quick(15), &corpus, &Sequential, &mut NoHooks).unwrap();
    let (a, la) = run();
    let (b, lb) = run();
    assert!(a.params_bitwise_eq(&b));
    assert_eq!(la.to_csv(), lb.to_csv());
    assert_eq!(la.evals_csv(), lb.evals_csv());
}

#[test]
fn zero_lambda_logs_zero_cosine_terms() {
    let corpus = small_corpus(5);
    let (_, log) =
        run_distillation(&teacher(), &tiny_config(2, None), &spec(&[2, 4], 0.0), &quick(10), &corpus, &Sequential, &mut NoHooks)
            .unwrap();
    assert!(log.steps.iter().all(|r| r.loss.per_layer.iter().all(|l| l.cos == 0.0)));
    assert!(log.steps.iter().all(|r| {
        let l1: f64 = r.loss.per_layer.iter().map(|l| l.l1).sum();
        (r.loss.total - l1).abs() <= 1e-5 * l1
    }));
}

#[test]
fn frozen_front_end_stays_put_and_teacher_init_copies_layers() {
    let corpus = small_corpus(6);
    let t = teacher();
    let (student, _) =
        run_distillation(&t, &tiny_config(2, None), &spec(&[4], 1.0), &quick(5), &corpus, &Sequential, &mut NoHooks).unwrap();
    for (name, p) in student.params() {
        if name.starts_with("frontend.") {
            assert!(p.bitwise_eq(t.param(name).unwrap()), "{name}");
        }
    }
    let no_train = TrainConfig {
        total_updates: 1,
        peak_lr: 1e-30,
        ..quick(1)
    };
    let (s, _) = run_distillation(&t, &tiny_config(2, None), &spec(&[4], 1.0), &no_train, &corpus, &Sequential, &mut NoHooks).unwrap();
    let differs = s
        .params()
        .iter()
        .filter(|(n, _)| n.starts_with("layers."))
        .any(|(n, p)| !p.bitwise_eq(t.param(n).unwrap()));
    // one update of at most 1e-30 cannot move an f32 weight of ordinary size
    assert!(!differs);
}

#[test]
fn disabled_teacher_init_starts_from_random_weights() {
    let corpus = small_corpus(6);
    let t = teacher();
    let cfg = TrainConfig {
        teacher_init: false,
        ..quick(1)
    };
    let (s, _) = run_distillation(&t, &tiny_config(2, None), &spec(&[4], 1.0), &cfg, &corpus, &Sequential, &mut NoHooks).unwrap();
    assert!(!s.param("layers.1.ffn.fc1.weight").unwrap().bitwise_eq(t.param("layers.1.ffn.fc1.weight").unwrap()));
}

#[derive(Default)]
struct Recorder {
    aborted: Option<u64>,
    steps: u64,
}

impl TrainHooks<f32> for Recorder {
    fn on_step(&mut self, _r: &lwkd_core::train::StepRecord) {
        self.steps += 1;
    }

    fn on_abort(&mut self, _student: &Encoder<f32>, step: u64, _error: &Error) {
        self.aborted = Some(step);
    }
}

#[test]
fn diverging_run_aborts_with_a_dump_hook() {
    let corpus = small_corpus(7);
    let cfg = TrainConfig {
        peak_lr: 1e30,
        grad_clip: None,
        ..quick(10)
    };
    let mut hooks = Recorder::default();
    let err = run_distillation(&teacher(), &tiny_config(2, None), &spec(&[4], 1.0), &cfg, &corpus, &Sequential, &mut hooks)
        .unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err:?}");
    assert_eq!(hooks.aborted, Some(hooks.steps + 1));
}

#[test]
fn mismatched_front_ends_are_rejected() {
    let corpus = small_corpus(8);
    let mut cfg = tiny_config(2, None);
    cfg.conv_layers[0].out_channels = 4;
    cfg.conv_layers[1].out_channels = 4;
    let err = run_distillation(&teacher(), &cfg, &spec(&[4], 1.0), &quick(2), &corpus, &Sequential, &mut NoHooks).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
