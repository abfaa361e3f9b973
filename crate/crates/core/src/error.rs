use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss is not deterministic: two evaluations gave {first} and {second}")]
    Determinism { first: f64, second: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("seen/unseen compositions overlap: {0}")]
    SplitOverlap(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("unknown {kind} `{name}`{}", suggest(.near))]
    UnknownName {
        kind: &'static str,
        name: String,
        near: Vec<String>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn suggest(near: &[String]) -> String {
    if near.is_empty() {
        String::new()
    } else {
        format!(" (did you mean: {})", near.join(", "))
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Dimension { op, lhs, rhs }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::SplitOverlap(_)
            | Error::ModelFormat(_)
            | Error::Checksum { .. }
            | Error::UnknownName { .. }
            | Error::Io { .. }
            | Error::Json(_) => 3,
            Error::Dimension { .. }
            | Error::NonFinite(_)
            | Error::Determinism { .. }
            | Error::Contract(_) => 4,
        }
    }
}
