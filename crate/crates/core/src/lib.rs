//! Hybrid-precision post-training quantization for super-resolution CNNs.
//!
//! The crate covers the full offline flow and a simulated runtime:
//!
//! - [`tensor`]: dense NCHW tensors and the layer kernels (convolution,
//!   relu, elementwise add, pixel-shuffle in naive and memory-aware forms).
//! - [`model`]: the layer-graph model representation, a bit-exact on-disk
//!   format, forward execution and analytic/synthetic fixture models.
//! - [`quant`]: affine fake-quantization — scale/zero-point derivation,
//!   calibration statistics, the weight quantizer and runtime (dynamic
//!   range) parameter derivation.
//! - [`cost`]: the wordlength-weighted operation-count cost model used as
//!   the optimizer objective.
//! - [`metrics`]: PSNR/SSIM, image file I/O and resampling.
//! - [`wlopt`]: per-layer wordlength selection — the greedy single-shot
//!   optimizer plus simulated-annealing, genetic and random-search
//!   baselines under a shared evaluation-budget harness.
//! - [`dre`]: layerwise resilience analysis and energy-concentration
//!   selection of layers that re-derive quantization parameters at run
//!   time.
//! - [`codec`]: the runtime pipeline — patch tiling, partition scheduling,
//!   runtime quantization accounting and dataset evaluation.
//! - [`synth`]: deterministic synthetic images for desk-scale evaluation.

pub mod codec;
pub mod cost;
pub mod dre;
pub mod error;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod synth;
pub mod tensor;
pub mod wlopt;

pub use error::{Error, Result};

/// Crate version embedded in every serialized artifact for provenance.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
