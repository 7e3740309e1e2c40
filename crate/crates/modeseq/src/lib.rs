//! Sequential multimodal trajectory prediction.
//!
//! This crate implements a motion-forecasting stack in which the K predicted
//! futures of an agent are decoded as an ordered sequence rather than an
//! unordered set: each mode is conditioned on the modes decoded before it,
//! either step by step (recurrent) or in one pass behind a causal attention
//! mask (parallel). Training pairs the ground truth with the earliest
//! sufficiently-close mode in the sequence, falling back to the closest mode
//! when none qualifies.
//!
//! Layout:
//! - [`num`]: dense f64 matrices and tape-based reverse-mode autodiff
//! - [`scene`]: scene data model, JSON IO, validation, frame normalization
//! - [`synth`]: synthetic fork-junction benchmark generator
//! - [`nn`]: parameter store, initialization, shared attention blocks
//! - [`encoder`]: agent/map context encoder
//! - [`decoder`]: recurrent and parallel mode-sequence decoders
//! - [`assign`]: earliest-match and winner-take-all target assignment
//! - [`loss`]: regression/classification/ranking objectives
//! - [`train`]: optimizer, schedule, training loop, checkpoints
//! - [`metrics`]: displacement, miss-rate, precision, coverage metrics
//! - [`model`]: full model wiring and evaluation entry points

pub mod assign;
pub mod decoder;
pub mod encoder;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod num;
pub mod scene;
pub mod synth;
pub mod train;
