use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint format version {found} (this build reads {supported})")]
    Version { found: u64, supported: u32 },
    #[error("checkpoint integrity: tensor {tensor}: {detail}")]
    Integrity { tensor: String, detail: String },
    #[error("{what}: {source}")]
    Json {
        what: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing inputs: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("{0}")]
    Usage(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] lwkd_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn json(what: impl Into<String>) -> impl FnOnce(serde_json::Error) -> Error {
        let what = what.into();
        move |source| Error::Json { what, source }
    }

    /// 1 for invalid user input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        use lwkd_core::Error as C;
        match self {
            Error::Usage(_) => 1,
            Error::Core(C::Parameter(_) | C::Config(_) | C::Spec(_) | C::Incompatible { .. } | C::Protocol(_)) => 1,
            _ => 2,
        }
    }
}
