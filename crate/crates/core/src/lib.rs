//! MCGU-Net: a U-Net variant whose skip connections are fused by
//! bidirectional ConvLSTMs, whose decoder is gated by squeeze-and-excitation
//! blocks and whose bottleneck is densely connected.
//!
//! Everything runs on a small tape-based reverse-mode autodiff engine over
//! `f64` tensors ([`numerics`]), so gradients can be verified against finite
//! differences end to end.

pub mod blocks;
pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
