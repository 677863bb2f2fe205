//! Task-Step-State procedural knowledge pipeline on frozen embedding features.
//!
//! The crate covers the full loop: building a three-level knowledge base
//! (tasks, ordered steps, before/mid/after state texts), clustering text
//! embeddings into semantic nodes, generating five families of pseudo-labels
//! for video clips, progressively pre-training a bottleneck adapter over the
//! hierarchy, fusing per-level representations, and scoring the result on
//! downstream recognition/forecasting tasks.
//!
//! Everything is seed-deterministic: same inputs and seed produce
//! byte-identical artifacts.

pub mod artifact;
pub mod autodiff;
pub mod checkpoint;
pub mod clustering;
pub mod corpus;
pub mod curriculum;
pub mod embeddings;
pub mod eval;
pub mod fusion;
pub mod labeling;
pub mod model;
pub mod rng;
pub mod synthetic;
pub mod tensor;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing data: {0}")]
    MissingData(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
