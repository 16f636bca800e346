//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed content in a text input (triple files, rule files).
    #[error("{file}: line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    /// A triple appears in more than one of train/valid/test.
    #[error("splits overlap: {triple} appears in {a} and {b}")]
    SplitOverlap {
        triple: String,
        a: &'static str,
        b: &'static str,
    },

    /// A token name is registered in two namespaces at once.
    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("config: {0}")]
    Config(String),

    /// Shape mismatch in a tensor op; names the op and the offending shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Non-finite value detected, or a numeric contract violated.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
