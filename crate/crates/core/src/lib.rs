//! Multitask CNN behavioral sequence embeddings.
//!
//! The crate covers the whole pipeline: raw page-view sequences are encoded
//! ([`data`]), embedded with categorical lookups plus a scaled continuous
//! embedding and positional encoding ([`embedding`]), passed through a
//! one-layer multi-range-kernel CNN with shared trunk and per-task heads
//! ([`model`]), trained with random loss weighting and Adam ([`train`]), and
//! scored with fraud-risk metrics ([`metrics`]).
//!
//! Everything runs on a small reverse-mode tensor engine ([`tensor`]). Batch
//! loops go through [`exec`], which uses rayon when the `parallel` feature is
//! enabled and falls back to plain iteration otherwise.

pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::{Graph, Mode, Scalar, Tensor, Var};
