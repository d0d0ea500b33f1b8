//! Post-training quantization toolkit for transformer linear layers.
//!
//! The crate quantizes weight matrices with a twin-log quantizer (separate
//! log-domain grids for positive and negative magnitudes, with search-based
//! clipping), lowers the result to a shift-only integer execution form, and
//! prepares activations for low-bit per-token quantization by smoothing and
//! rotating outlier channels. Everything operates on tensors loaded from a
//! JSON-manifest + raw-binary container and produces quantized artifacts plus
//! per-layer error reports.
//!
//! Module map:
//! - [`tensorio`] — container format, artifact round-trips, synthetic tensors
//! - [`uniquant`] — baseline uniform quantizer (per-tensor / per-channel / per-token)
//! - [`twinlog`] — twin-log weight quantizer with clip search
//! - [`intpipe`] — exponent/residual decomposition and SHIFT/AND matmul simulation
//! - [`rotation`] — fluctuation metric, Hadamard/greedy rotations, zigzag
//!   permutation, smoothing migration
//! - [`pipeline`] — per-layer calibration, quantization, simulation, reports

pub mod batch;
pub mod error;
pub mod intpipe;
pub mod math;
pub mod pipeline;
pub mod rotation;
pub mod tensorio;
pub mod twinlog;
pub mod uniquant;

pub use batch::{ActivationBatch, WeightMatrix};
pub use error::{Error, Result};
