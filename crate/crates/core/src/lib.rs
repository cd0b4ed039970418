//! Numerical core for layer-wise, multi-task knowledge distillation of
//! convolutional + transformer speech encoders.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches files,
//! clocks or threads lives in the companion `lwkd` crate; here we keep the
//! tensor tape, the encoder definitions, the distillation objective, the
//! optimizer and schedule, the synthetic corpus generator and the probes.
//!
//! Two numeric modes are supported through the [`Element`] trait: `f32` for
//! training and `f64` for gradient verification.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod distill;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use distill::{DistillSpec, LossBreakdown, Reduction};
pub use error::{Error, Result};
pub use exec::{BatchExecutor, Sequential};
pub use graph::{Graph, Var};
pub use model::{ConvLayer, Encoder, EncoderConfig, FeatureMap};
pub use tensor::{Element, Tensor};
pub use train::{TrainConfig, TrainLog};
