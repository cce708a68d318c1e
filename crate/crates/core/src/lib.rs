//! Discrete diffusion language modelling at desk scale.
//!
//! The crate covers the full pipeline: a verifiable synthetic corpus, the
//! mask- and edit-based forward processes, a small bidirectional transformer
//! denoiser with hand-written gradients and a block-causal KV cache, the
//! training objectives, the block-wise reverse sampler, the three-phase
//! training pipeline and the throughput benchmarks.

pub mod bench;
pub mod corpus;
pub mod corruption;
pub mod denoiser;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod sampler;

mod error;

pub use error::{Error, Result};
