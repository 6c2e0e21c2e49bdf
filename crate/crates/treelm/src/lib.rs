//! treelm: a desk-scale long-context language model built around
//! tree-structured context compression.
//!
//! A lower "compressor" stack (the first `M` transformer layers) encodes
//! past context chunks into downsampled per-layer key/value states organized
//! by query-dependent binary context trees; the upper decoder consumes them
//! through position-aware cross-attention in its first `M` layers. The crate
//! also carries the training loop, synthetic tasks, evaluation harnesses,
//! and exact attention-operation accounting used to verify the efficiency
//! story.

pub mod compressor;
pub mod config;
pub mod decoder;
pub mod context_tree;
pub mod error;
pub mod numerics;
pub mod params;

pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
