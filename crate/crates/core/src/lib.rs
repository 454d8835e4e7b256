//! Personalized decoding for small language models.
//!
//! The crate trains a tiny fixed-window language model, specializes it per
//! user with low-rank adapters, refines the adapters with preference
//! optimization against synthesized negatives, and decodes by maximizing the
//! implicit user reward `log π_user − α · log π_base` over a plausibility
//! head. Evaluation tooling (ROUGE, perplexity, win-rates, reward
//! separation) and an end-to-end pipeline live alongside.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod decode;
pub mod error;
pub mod exec;
pub mod lmcore;
pub mod metrics;
pub mod pipeline;
pub mod prefopt;
pub mod reward;
pub mod tinylm;

pub use error::{CheckpointError, Error, Result};
pub use lmcore::{
    decode_text, encode, sequence_log_prob, LanguageModel, LogProbVector, TokenId, TokenSequence,
    UniformModel, Vocabulary,
};
