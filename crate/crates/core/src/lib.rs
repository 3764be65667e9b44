//! Fixed-point quantization-aware training and bit-exact integer inference
//! for a small convolutional keyword spotter.

mod container;
pub mod engine;
pub mod error;
pub mod features;
pub mod fxp_core;
pub mod graph;
pub mod qat;
pub mod trainer;

pub use error::{Error, Result};
