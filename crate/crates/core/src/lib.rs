//! Toy multimodal decoder, vision-token pruning runtime, diagnostic probes
//! and an analytical cost model.

pub mod cost;
pub mod engine;
pub mod error;
pub mod kernels;
pub mod par;
pub mod probes;
pub mod pruner;

pub use error::{Error, Result};
