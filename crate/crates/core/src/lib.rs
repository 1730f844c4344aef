//! Self-supervised contrastive learning of sentence embeddings from sampled
//! text spans.
//!
//! Anchor spans and nearby positive spans are sampled from each document, a
//! compact transformer encoder embeds them by mean pooling, and an in-batch
//! NT-Xent loss (optionally summed with masked language modeling on the
//! anchors) trains the encoder. The evaluation kit embeds text, scores STS by
//! Spearman correlation, runs nearest-neighbor retrieval and linear probes,
//! and aggregates task scores.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
