use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lwkd::config::ExperimentConfig;
use lwkd::error::{Error, Result};
use lwkd::pipeline::{self, DistillOptions, ProbeOptions};
use lwkd::report::{self, Figure};
use lwkd_core::probe::{ImportanceMode, TaskKind};

/// Layer-wise multi-task distillation of speech encoders at desk scale.
#[derive(Debug, Parser)]
#[command(name = "lwkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Overrides every seed of the experiment.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file merged over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.apply_seed(s);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    MultiplyNorm,
    DivideNorm,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus into --out.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Distill a student from a frozen teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Teacher layers to predict, e.g. 4,8,12.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        /// Weight of the cosine term.
        #[arg(long)]
        lambda: Option<f64>,
        /// Train on the L1 term only.
        #[arg(long, conflicts_with = "lambda")]
        no_cos: bool,
        /// Start the student from random weights.
        #[arg(long)]
        no_teacher_init: bool,
        /// Train the convolutional front-end too.
        #[arg(long)]
        unfreeze_frontend: bool,
        /// Disable gradient-norm clipping.
        #[arg(long)]
        no_clip: bool,
    },
    /// Remove prediction heads from a checkpoint.
    StripHeads {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to strip.
        #[arg(long)]
        input: PathBuf,
        /// Output file; defaults to <out>/stripped.dkd.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train weighted-sum probes on a frozen upstream.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        upstream: PathBuf,
        /// Corpus directory; generated from the config when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Tasks to probe; all when absent.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<TaskKind>,
        /// Probe steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Also probe a same-config student with random weights.
        #[arg(long)]
        random_baseline: bool,
    },
    /// Normalized layer importances of an upstream that keeps its heads.
    AnalyzeLayers {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        upstream: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<TaskKind>,
        /// How weights and representation norms are combined.
        #[arg(long, value_enum)]
        importance_mode: Option<Mode>,
    },
    /// Parameter, FLOP and inference-time comparison.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to compare, reference first; the configured teacher
        /// and student when absent.
        #[arg(long, value_delimiter = ',')]
        models: Vec<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Finite-difference check of every autodiff primitive.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Random shapes per primitive.
        #[arg(long, default_value_t = 3)]
        shapes: usize,
        /// Maximum relative error.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Render CSV logs of a run directory as tables and SVG plots.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directory to read.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        fig: Figure,
    },
    /// Distill and probe one student per predicted-layer set.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Teacher checkpoint; a random teacher is built from the config when
    /// absent.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Corpus directory; generated from the config when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Number of updates.
    #[arg(long)]
    steps: Option<u64>,
    /// Record elapsed milliseconds in the training log.
    #[arg(long)]
    wall_clock: bool,
    /// Progress on stderr.
    #[arg(long, short)]
    verbose: bool,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) -> DistillOptions {
        if let Some(s) = self.steps {
            cfg.train.total_updates = s;
        }
        DistillOptions {
            teacher: self.teacher.clone(),
            corpus: self.corpus.clone(),
            wall_clock: self.wall_clock,
            verbose: self.verbose,
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus { common } => {
            let corpus = pipeline::gen_corpus(&common.experiment()?, &common.out)?;
            println!("{} utterances written to {}", corpus.len(), common.out.display());
        }
        Command::Distill {
            common,
            train,
            layers,
            lambda,
            no_cos,
            no_teacher_init,
            unfreeze_frontend,
            no_clip,
        } => {
            let mut cfg = common.experiment()?;
            let opts = train.apply(&mut cfg);
            if let Some(mut l) = layers {
                l.sort_unstable();
                l.dedup();
                cfg.distill.predicted_layers = l;
            }
            if let Some(l) = lambda {
                cfg.distill.lambda = l;
            }
            if no_cos {
                cfg.distill.lambda = 0.0;
            }
            cfg.train.teacher_init &= !no_teacher_init;
            cfg.train.freeze_frontend &= !unfreeze_frontend;
            if no_clip {
                cfg.train.grad_clip = None;
            }
            let run = pipeline::distill(&cfg, &opts, &common.out)?;
            println!(
                "loss {:.4} -> {:.4}, held-out cosine {:.4} -> {:.4}; student in {}",
                run.summary.first_loss,
                run.summary.final_loss,
                run.summary.first_cosine,
                run.summary.final_cosine,
                common.out.join(pipeline::STUDENT).display()
            );
        }
        Command::StripHeads { common, input, output } => {
            let output = output.unwrap_or_else(|| common.out.join("stripped.dkd"));
            let (_, removed) = pipeline::strip_heads(&input, &output)?;
            println!("removed {removed} head parameters; wrote {}", output.display());
        }
        Command::Probe {
            common,
            upstream,
            corpus,
            tasks,
            steps,
            random_baseline,
        } => {
            let mut cfg = common.experiment()?;
            if let Some(s) = steps {
                cfg.probe.steps = s;
            }
            let opts = ProbeOptions {
                corpus,
                tasks,
                random_baseline,
            };
            for r in pipeline::probe(&upstream, &cfg, &opts, &common.out)? {
                println!(
                    "{:<12} {:<8} {:<9} accuracy {:.3}",
                    r.upstream,
                    r.result.task.name(),
                    if r.result.shuffled { "shuffled" } else { "" },
                    r.result.accuracy
                );
            }
        }
        Command::AnalyzeLayers {
            common,
            upstream,
            corpus,
            tasks,
            importance_mode,
        } => {
            let mut cfg = common.experiment()?;
            if let Some(m) = importance_mode {
                cfg.importance = match m {
                    Mode::MultiplyNorm => ImportanceMode::MultiplyNorm,
                    Mode::DivideNorm => ImportanceMode::DivideNorm,
                };
            }
            for t in pipeline::analyze_layers(&upstream, &cfg, corpus.as_deref(), &tasks, &common.out)? {
                let cells: Vec<String> = t.rows.iter().map(|(n, v)| format!("{n} {v:.3}")).collect();
                println!("{:<8} {}", t.task.name(), cells.join("  "));
            }
        }
        Command::Profile {
            common,
            models,
            corpus,
            runs,
            batch,
        } => {
            let mut cfg = common.experiment()?;
            if let Some(r) = runs {
                cfg.profile.runs = r;
            }
            if let Some(b) = batch {
                cfg.profile.batch = b;
            }
            let reports = pipeline::profile(&models, &cfg, corpus.as_deref(), &common.out)?;
            print!("{}", lwkd::profiler::to_table(&reports));
        }
        Command::GradCheck { common, shapes, tol } => {
            let results = pipeline::grad_check(common.seed.unwrap_or(0), shapes, tol, &common.out)?;
            let worst = results.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
            println!("{} checks passed, worst relative error {worst:.3e}", results.len());
        }
        Command::Report { common, input, fig } => {
            for p in report::emit_report(&input, fig, &common.out)? {
                println!("{}", p.display());
            }
        }
        Command::Sweep { common, train } => {
            let mut cfg = common.experiment()?;
            let opts = train.apply(&mut cfg);
            pipeline::sweep(&cfg, &opts, &common.out)?;
            print!("{}", std::fs::read_to_string(common.out.join("sweep_table.txt")).map_err(Error::io(&common.out))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
