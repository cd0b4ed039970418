use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: input length {got} is shorter than required {required}")]
    Length {
        op: &'static str,
        got: usize,
        required: usize,
    },
    #[error("{op}: expected a scalar (one element), got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("invalid distillation spec: {0}")]
    Spec(String),
    #[error("student is incompatible with teacher; offending parameters: {}", .names.join(", "))]
    Incompatible { names: Vec<String> },
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
}

pub(crate) fn shape_err(op: &'static str, expected: impl Into<String>, got: &[usize]) -> Error {
    Error::Shape {
        op,
        expected: expected.into(),
        got: alloc::format!("{got:?}"),
    }
}
