//! Files, clocks and threads around `lwkd-core`: the `DKD1` checkpoint
//! format, corpus directories, experiment configs, the profiler, reports and
//! the pipeline steps behind the `lwkd` command line.

pub mod checkpoint;
pub mod config;
pub mod corpus_io;
pub mod digest;
pub mod error;
pub mod exec;
pub mod pipeline;
pub mod profiler;
pub mod report;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::{Error, Result};
