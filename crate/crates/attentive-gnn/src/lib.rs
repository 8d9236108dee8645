//! Attentive graph neural network for few-shot classification over feature
//! vectors.
//!
//! The model classifies query samples from a handful of labeled support
//! samples by running message passing on a complete task graph with three
//! attention mechanisms:
//!
//! - **node self-attention** — fuses a sample-correlation matrix (cosine
//!   similarity) with a label-correlation matrix and uses the result to
//!   update both features and soft labels before the first layer;
//! - **graph neighbor attention** — a learned MLP scores every node pair,
//!   then each adjacency row is projected onto an l0 ball by keeping its
//!   top `beta * V` entries by magnitude;
//! - **layer memory attention** — each layer's output is concatenated with
//!   earlier features (dense mode) or the updated label block (label
//!   mode), so new layers add only `m` fresh feature columns.
//!
//! Everything runs on a small reverse-mode autodiff tape ([`tensor`]),
//! trains episodically with Adam ([`training`]), and ships with an
//! over-smoothing analysis suite ([`analysis`]) plus a CLI.
//!
//! With the default `parallel` feature, task batches within a training
//! step and evaluation episodes fan out across threads via rayon; gradient
//! reduction always sums in fixed task order, so results are bit-identical
//! to the sequential fallback.

pub mod analysis;
pub mod attention;
pub mod config;
pub mod episodes;
mod error;
pub(crate) mod exec;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
