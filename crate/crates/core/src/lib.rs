//! Core algorithms for a desk-scale multi-modal multi-task tuning stack:
//! a tiny causal language model with injected visual tokens, task-specific
//! projectors and decoders for masks and boxes, the composed training
//! losses, binary-mask codecs, and evaluation metrics.
//!
//! The crate is `no_std` + `alloc`: it performs no IO and owns no files.
//! Dataset handling, checkpoints, HTTP clients, and the CLI live in the
//! companion `uvlm-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod check;
pub mod encoders;
pub mod graph;
pub mod heads;
pub mod lm;
pub mod losses;
pub mod mask;
pub mod mathfn;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod tokens;

pub use graph::{Graph, Var};
pub use tensor::Tensor;
