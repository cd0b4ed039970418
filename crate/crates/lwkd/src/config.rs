//! Experiment configuration files.
//!
//! A config file is a JSON object whose keys are merged over the desk-scale
//! defaults, so a file only needs the values it changes:
//!
//! ```json
//! { "train": { "total_updates": 500 }, "distill": { "lambda": 0.0 } }
//! ```

use std::fs;
use std::path::Path;

use lwkd_core::distill::DistillSpec;
use lwkd_core::probe::{ImportanceMode, ProbeConfig};
use lwkd_core::synth::SynthParams;
use lwkd_core::{EncoderConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub runs: usize,
    pub batch: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { runs: 3, batch: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of the randomly initialized teacher.
    pub teacher_seed: u64,
    pub corpus: SynthParams,
    pub teacher: EncoderConfig,
    pub student: EncoderConfig,
    pub distill: DistillSpec,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub importance: ImportanceMode,
    pub profile: ProfileConfig,
}

impl Default for ExperimentConfig {
    /// 12-layer D=64 teacher, 2-layer student predicting layers 4, 8 and 12.
    fn default() -> Self {
        Self {
            teacher_seed: 1,
            corpus: SynthParams::default(),
            teacher: EncoderConfig::desk_teacher(12),
            student: EncoderConfig::desk_student(None),
            distill: DistillSpec {
                predicted_layers: vec![4, 8, 12],
                ..DistillSpec::default()
            },
            train: TrainConfig::desk(),
            probe: ProbeConfig::default(),
            importance: ImportanceMode::default(),
            profile: ProfileConfig::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let over: Value = serde_json::from_str(text).map_err(Error::json("config"))?;
        let mut base = serde_json::to_value(Self::default()).map_err(Error::json("default config"))?;
        merge(&mut base, over);
        serde_json::from_value(base).map_err(|e| Error::Usage(format!("invalid config: {e}")))
    }

    /// Sets every seed of the experiment to `seed`.
    pub fn apply_seed(&mut self, seed: u64) {
        self.teacher_seed = seed;
        self.corpus.seed = seed;
        self.train.seed = seed;
        self.probe.seed = seed;
    }

    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::from_json(&fs::read_to_string(p).map_err(Error::io(p))?),
        }
    }
}
