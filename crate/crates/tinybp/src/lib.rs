//! End-to-end pipeline for compact 1-D CNN blood-pressure estimators:
//! train a float seed network, search over per-layer operator choices with a
//! differentiable size penalty, quantize the winner to int8, and run or emit
//! portable integer-only C for microcontroller-class targets.
//!
//! Everything is seeded and single-threaded in the numeric kernels; the only
//! parallelism is across independent sweep points. Identical seeds give
//! bit-identical results.

pub mod check;
pub mod data;
pub mod error;
pub mod graph;
pub mod intrt;
pub mod model;
pub mod nas;
pub mod quant;
pub mod tensor;
mod wire;

pub use error::{Error, Result};
