use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("gradient requested with an empty parameter set")]
    EmptyWrt,

    #[error("gradient tensor carries no graph; differentiate with create_graph enabled first")]
    GraphNotRetained,

    #[error("parameter is not part of the graph being differentiated")]
    DisjointWrt,

    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("task sampling failed: {0}")]
    Sampling(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint format version {found} does not match supported version {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint shape mismatch at {layer}: expected {expected:?}, found {found:?}")]
    CheckpointShape {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("stopped at meta-step {0} on request")]
    Halted(u64),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that originate in the numerics rather than in inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Numerical(_) | Error::Sampling(_)
        )
    }
}
