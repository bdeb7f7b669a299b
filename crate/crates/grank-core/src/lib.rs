//! GRank core: an index-free two-stage retrieval stack.
//!
//! Stage 1 is a target-aware sequence generator whose query vector drives a
//! flat maximum-inner-product scan over the item corpus; stage 2 rescoring is
//! a lightweight cross-attention ranker over a long interaction history. Both
//! are trained jointly with in-batch InfoNCE losses on a small reverse-mode
//! autodiff tape, and the serving cascade, benchmark harness, and evaluation
//! metrics live alongside the model.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod mips;
pub mod model;
pub mod numeric;
pub mod ranker;
pub mod serving;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
