//! # bialign
//!
//! Unsupervised alignment of two monolingual word-embedding spaces.
//!
//! The pipeline estimates a single orthogonal map `Q` such that `XQ` matches
//! `Y` and `YQᵀ` matches `X`. Each stochastic step draws a batch from both
//! vocabularies, computes a matching between them with a KL-relaxed
//! (unbalanced) entropic transport solver, and takes a projected gradient
//! step on `‖XQ − PY‖²`. A CSLS mutual-neighbour refinement stage and a
//! precision@1 evaluator complete the lexicon-induction workflow.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`embeddings`] | `.vec` loading, normalization, batch sampling |
//! | [`ot`] | cost matrices, balanced and generalized Sinkhorn, exact brute-force oracle |
//! | [`mapping`] | Procrustes, orthogonal projection, gradient step, `Q` text format |
//! | [`align`] | initialization, the bidirectional relaxed-matching loop, refinement |
//! | [`retrieval`] | CSLS / NN retrieval, dictionaries, precision@1 |
//! | [`synthetic`] | rotated-and-permuted embedding pairs with known ground truth |
//! | [`cli`] | the `bialign` command-line front end |

pub mod align;
pub mod cli;
pub mod embeddings;
pub mod mapping;
pub mod ot;
pub mod retrieval;
pub mod synthetic;

use std::path::PathBuf;

pub use align::{AlignConfig, Direction, TrainState};
pub use embeddings::{Batch, EmbeddingMatrix};
pub use mapping::OrthogonalMap;
pub use ot::{CostMatrix, MarginalWeights, Metric, SinkhornParams, TransportPlan};
pub use retrieval::{BilingualDictionary, EvalReport};

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed text input. `line` is 1-based.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Any non-I/O error raised while reading `path`.
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Input that cannot be processed numerically (zero rows, NaN, failed SVD).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        match self {
            e @ (Error::Io { .. } | Error::InFile { .. }) => e,
            e => Error::InFile {
                path: path.into(),
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
