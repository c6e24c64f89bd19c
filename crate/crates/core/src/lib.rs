//! Multimodal risk classification built on capsule routing.
//!
//! The crate ingests precomputed per-modality embeddings (two text channels,
//! one image channel) plus raw numeric features, trains a capsule-based
//! fusion network with modality confidence gating, and compares it against
//! addition, concatenation, and cross-attention fusion baselines. Everything
//! runs on a small f64 autodiff tape so results are deterministic and
//! gradient-checkable.

pub mod baselines;
pub mod capsule;
pub mod cli;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model_io;
pub mod numerics;
pub mod probe;
pub mod report;
pub mod train;

pub use error::{Error, Result};
