//! Core library: deterministic tensor math, small trainable networks,
//! performance-counter trace capture, gradient-based adversarial attacks, and
//! trace-based attack detection.

pub mod apc;
pub mod attack;
pub mod autodiff;
pub mod container;
pub mod error;
pub mod layers;
pub mod network;
pub mod rng;
pub mod tanto;
pub mod tensor;
mod wire;

pub use error::{Error, Result};
pub use tensor::Tensor;
