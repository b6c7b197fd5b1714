//! Quantized Mixture-of-Experts Vision Transformer inference.
//!
//! The crate is layered bottom-up:
//!
//! - [`numerics`]: dense double-precision matrices, LayerNorm, softmax, GELU and a seeded RNG.
//! - [`model`]: float reference MoE-ViT forward pass with activation tracing.
//! - [`quant`]: uniform quantizers, min-max calibration and integer matmul.
//! - [`reparam`]: rewriting LayerNorm and its consumers so per-channel asymmetric
//!   post-LayerNorm quantization becomes per-layer symmetric.
//! - [`logquant`]: log-base-√2 attention quantizer, shift-only attention-value product
//!   and the fused 3-pass softmax.
//! - [`qinfer`]: end-to-end W8/A8/Attn4 quantized inference and paired model comparison.

pub mod error;
pub mod logquant;
pub mod model;
pub mod numerics;
pub mod qinfer;
pub mod quant;
pub mod reparam;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
