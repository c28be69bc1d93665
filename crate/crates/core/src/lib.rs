//! Knowledge-injected masked language model pretraining at desk scale.
//!
//! The pipeline, in data-flow order:
//!
//! ```text
//! triples.tsv ─► kg ─────────────┐
//! corpus.txt ─► corpus (link, count) ─► detector (Freq · SI · KC) ─► injection ─► encoder ─► decoder
//!                                                                                   │
//!                                                         pretrain (MLM + decoding loss, SGD)
//!                                                                                   │
//!                                                                        probe (cloze P@1)
//! ```
//!
//! Every numeric path runs in `f64` on a small tape-based autodiff engine
//! ([`autograd`]) so gradients can be checked against finite differences.

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod detector;
pub mod encoder;
pub mod injection;
pub mod kg;
pub mod model;
pub mod pretrain;
pub mod probe;
pub mod synth;
pub mod tensor;

use std::path::PathBuf;

pub use autograd::{Graph, ParamId, ParamStore, Var};
pub use config::RunConfig;
pub use corpus::{FrequencyTable, LinkedSentence, Mention, PowerLawFit, Vocabulary};
pub use detector::{DetectionConfig, DetectionReport, MentionScore, Policy};
pub use encoder::{EncoderConfig, EncoderModel, PoolRole, SequenceStates};
pub use kg::{EntityId, KnowledgeGraph, RelationId, Triple};
pub use model::DkplmModel;
pub use tensor::Mat;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("empty knowledge graph")]
    EmptyKnowledgeGraph,
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("unknown relation {0}")]
    UnknownRelation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("degenerate frequency table")]
    DegenerateFrequencyTable,
    #[error("degenerate representation")]
    DegenerateRepresentation,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
