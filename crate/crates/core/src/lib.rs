//! Training, guided sampling and evaluation of interleaved text+image
//! "thought trace" models on a synthetic shapes world.
//!
//! Module map:
//! - [`toyworld`]: scenes, rendering, descriptions, exact detection and scoring
//! - [`codec`]: lossless palette tokenizer and codebook features
//! - [`sequence`]: unified vocabulary, trace schemas, assembly/parsing, loss masks
//! - [`model`]: small decoder-only transformer with LM and projection heads
//! - [`losses`]: next-token, reconstruction and composite objectives
//! - [`datagen`]: synthetic SFT trace pipeline
//! - [`sampler`]: constrained decoding with multi-condition guidance
//! - [`harness`]: training loop, evaluation, ablations and reports

pub mod codec;
pub mod datagen;
pub mod harness;
pub mod losses;
pub mod model;
pub mod sampler;
pub mod sequence;
pub mod toyworld;
