use std::path::PathBuf;

use thiserror::Error;

use crate::tensors::SitePosition;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing tensor file {0}")]
    MissingFile(PathBuf),

    #[error("shape mismatch for tensor `{tensor}`: expected {expected} values, found {found}")]
    ShapeMismatch {
        tensor: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in tensor `{tensor}` at flat index {index}")]
    NonFinite { tensor: String, index: usize },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("sites {a} and {b} are not match-compatible (model dims {dim_a} vs {dim_b})")]
    MatchIncompatible {
        a: SitePosition,
        b: SitePosition,
        dim_a: usize,
        dim_b: usize,
    },

    #[error("no dictionary at {0}")]
    MissingDictionary(SitePosition),

    #[error("{what} {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("target feature {index} at {position} is inactive at token {token}")]
    InactiveTarget {
        position: SitePosition,
        index: usize,
        token: usize,
    },

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("judge unavailable: {0}")]
    Judge(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
