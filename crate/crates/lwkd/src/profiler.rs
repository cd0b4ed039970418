//! Parameter, FLOP and wall-clock accounting.
//!
//! Every model extracts features for the whole corpus `runs` times, one
//! utterance after another on the calling thread, in groups of `batch`
//! utterances. The first model is the reference for every ratio.

use std::fmt::Write;
use std::time::Instant;

use lwkd_core::model::{count_flops, count_params};
use lwkd_core::synth::Corpus;
use lwkd_core::Encoder;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub model: String,
    pub params: usize,
    pub param_ratio: f64,
    pub run_seconds: Vec<f64>,
    pub mean_seconds: f64,
    pub speedup: f64,
    /// Reference MACs over this model's MACs for one corpus utterance.
    pub flop_ratio: f64,
    pub threads: usize,
    pub batch: usize,
}

pub fn profile(models: &[(String, Encoder<f32>)], corpus: &Corpus, runs: usize, batch: usize) -> Result<Vec<ProfileReport>> {
    if corpus.is_empty() {
        return Err(lwkd_core::Error::Data("cannot profile on an empty corpus".into()).into());
    }
    if runs == 0 || batch == 0 {
        return Err(lwkd_core::Error::Parameter("runs and batch must be >= 1".into()).into());
    }
    if models.is_empty() {
        return Err(lwkd_core::Error::Parameter("no models to profile".into()).into());
    }
    let samples = corpus.records.iter().map(|r| r.length).min().unwrap_or(0);
    let waves: Vec<Vec<f32>> = (0..corpus.len()).map(|i| corpus.audio(i).to_vec()).collect();

    let mut measured = Vec::with_capacity(models.len());
    for (name, enc) in models {
        let mut run_seconds = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            for group in waves.chunks(batch) {
                for w in group {
                    std::hint::black_box(enc.forward_all_layers(w)?);
                }
            }
            run_seconds.push(start.elapsed().as_secs_f64());
        }
        let mean_seconds = run_seconds.iter().sum::<f64>() / runs as f64;
        let params = count_params(enc.config())?.total;
        let macs = count_flops(enc.config(), samples)?.total;
        measured.push((name.clone(), params, run_seconds, mean_seconds, macs));
    }
    let (ref_params, ref_secs, ref_macs) = (measured[0].1, measured[0].3, measured[0].4);
    Ok(measured
        .into_iter()
        .map(|(model, params, run_seconds, mean_seconds, macs)| ProfileReport {
            model,
            params,
            param_ratio: params as f64 / ref_params as f64,
            run_seconds,
            mean_seconds,
            speedup: ref_secs / mean_seconds,
            flop_ratio: ref_macs as f64 / macs as f64,
            threads: 1,
            batch,
        })
        .collect())
}

/// `model,params,param_ratio,mean_seconds,speedup,flop_ratio,threads,batch,run_seconds`
/// where `run_seconds` is `;`-separated.
pub fn to_csv(reports: &[ProfileReport]) -> String {
    let mut s = String::from("model,params,param_ratio,mean_seconds,speedup,flop_ratio,threads,batch,run_seconds\n");
    for r in reports {
        let runs: Vec<String> = r.run_seconds.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            r.model,
            r.params,
            r.param_ratio,
            r.mean_seconds,
            r.speedup,
            r.flop_ratio,
            r.threads,
            r.batch,
            runs.join(";")
        );
    }
    s
}

/// Aligned text table: model, parameters in millions with the share of the
/// reference, inference seconds with the speedup.
pub fn to_table(reports: &[ProfileReport]) -> String {
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                format!("{:.2} ({:.0}%)", r.params as f64 / 1e6, 100.0 * r.param_ratio),
                format!("{:.3} ({:.2}X)", r.mean_seconds, r.speedup),
                format!("{:.2}X", r.flop_ratio),
            ]
        })
        .collect();
    let head = [
        "Model".to_string(),
        "# param. (Millions)".to_string(),
        "Inf. time (seconds)".to_string(),
        "FLOP ratio".to_string(),
    ];
    let mut widths = head.clone().map(|h| h.len());
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String; 4]| {
        let mut s = format!("{:<w$}", cells[0], w = widths[0]);
        for (c, w) in cells.iter().zip(widths).skip(1) {
            let _ = write!(s, "  {c:>w$}");
        }
        s.push('\n');
        s
    };
    let mut out = line(&head);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r));
    }
    out
}
