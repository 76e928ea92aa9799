//! Vision-language-action driving model with world-model self-supervision,
//! trained and evaluated on a deterministic synthetic driving world.
//!
//! Module map:
//! - [`tensor`]: reverse-mode autodiff tape, AdamW, checkpoints.
//! - [`gridworld`]: lane geometry, scripted agents, expert policy, raster frames, dataset files.
//! - [`tokenizers`]: patch codebook, vocabulary layout, DCT action tokens.
//! - [`backbone`]: causal transformer over interleaved command/vision/action chunks.
//! - [`diffusion`]: latent diffusion world model on future frames.
//! - [`experts`]: joint-attention action expert with query, autoregressive and flow decoders.
//! - [`training`]: two-stage training, scale sweep, ablations, latency bench.
//! - [`eval`]: ADE, collision rate, PDMS / EPDMS.

pub mod backbone;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experts;
pub mod gridworld;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod tokenizers;
pub mod training;
