use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid token id {id} (vocabulary size {vocab_size})")]
    InvalidTokenId { id: usize, vocab_size: usize },

    #[error("keyword not representable: {0:?}")]
    KeywordNotRepresentable(String),

    #[error("concept bank infeasible: placed {placed} of {requested} signatures in {dim} dimensions")]
    ConceptBankInfeasible {
        placed: usize,
        requested: usize,
        dim: usize,
    },

    #[error("grid too small: {0}")]
    GridTooSmall(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("teacher is frozen")]
    Frozen,

    #[error("degenerate document frequency: corpus needs at least two images")]
    DegenerateDocumentFrequency,

    #[error("image {0} has no references")]
    MissingReference(u64),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("numerical divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact(_) => 4,
            Error::Divergence { .. } => 5,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 4,
            _ => 3,
        }
    }
}
