//! Block-level speculative routing for autoregressive video generation.
//!
//! A small drafter proposes each block; the block is decoded, scored frame by
//! frame, and either committed to the target's KV cache (accept) or
//! regenerated by the target from the same initial noise (reject). Scores are
//! aggregated with the worst frame, block 0 is force-rejected, and a single
//! threshold trades quality for speed.
//!
//! Neural components sit behind the [`engine::Generator`], [`engine::Decoder`]
//! and [`engine::Scorer`] traits. The [`synth`] module provides a deterministic
//! synthetic family calibrated against reference measurements so the
//! quality/speed arithmetic can be reproduced without GPUs, and [`traceio`]
//! replays traces recorded from a real pipeline.

pub mod caches;
pub mod calibration;
pub mod config;
pub mod costmodel;
pub mod digest;
pub mod engine;
mod error;
pub mod nnls;
pub mod router;
pub mod sweep;
pub mod synth;
pub mod table;
pub mod traceio;
pub mod types;

pub use crate::config::{default_config, pixel_frame_count, GenerationConfig, PromptSpec};
pub use crate::error::{Error, ErrorKind, Result};
