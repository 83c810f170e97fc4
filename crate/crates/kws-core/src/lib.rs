//! Streaming keyword-spotting engine.
//!
//! A compact causal transformer encoder (convolutional front end, windowed
//! self-attention with cross-layer weight sharing and low-rank projections,
//! group-separable feedforward) scores log-mel audio frames; smoothing and
//! thresholding turn the score stream into trigger events; the evaluation
//! harness sweeps thresholds into detection-error-tradeoff curves.

pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod kernels;
pub mod labels;
pub mod loss;
pub mod model;
pub mod parallel;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
