//! Desk-scale, bit-deterministic implementation of tensor-parallel latent
//! attention (TPLA) together with the reference designs it is measured
//! against: multi-head latent attention (MLA) and grouped latent attention
//! (GLA).
//!
//! Everything here runs on plain `f64` matrices on a single machine. Multi-
//! device execution is *simulated*: each simulated device owns a slice of the
//! latent cache and a set of attention heads, computes its partial results
//! independently, and exchanges data only through explicit collective
//! operations with a fixed reduction order. That makes every run exactly
//! reproducible, which in turn makes strong claims testable:
//!
//! - latent-space reparameterization with any orthogonal matrix leaves the
//!   attention output unchanged to floating-point noise;
//! - TPLA with both correction terms made exact reproduces single-device MLA;
//! - TPLA restricted to one latent slice per device is bitwise identical to a
//!   GLA configuration with duplicated heads;
//! - approximation error ranks the way the scaling analysis predicts across
//!   the sliced-RMS / sliced-softmax variants.
//!
//! Module layout:
//!
//! - [`numerics`]: matrices, seeded RNG, RMS normalization, rotary position
//!   encoding, and a Jacobi eigensolver;
//! - [`config`]: model dimensions and named presets;
//! - [`mla`]: the single-device reference pipeline (prefill, decode, weight
//!   absorption, latent cache);
//! - [`reparam`]: orthogonal latent transforms (identity, Hadamard, PCA) and
//!   the per-slice scaling constants they induce;
//! - [`synth`]: synthetic anisotropic models and calibration data;
//! - [`shard`]: shard plans, per-device state, and the sharded decode step in
//!   its exact and sliced variants;
//! - [`pipeline`]: prefill/decode separation experiments comparing sharded
//!   rollouts against the single-device oracle;
//! - [`cost`]: analytical per-token KV-cache and FLOP accounting;
//! - [`container`]: a seekable binary tensor container for weights,
//!   transforms, and calibration sets;
//! - [`verify`]: named self-checks used by the command-line `verify` command.

pub mod config;
pub mod container;
pub mod cost;
pub mod error;
pub mod mla;
pub mod numerics;
pub mod pipeline;
pub mod reparam;
pub mod shard;
pub mod synth;
pub mod verify;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use numerics::matrix::Matrix;
pub use numerics::rng::SeededRng;
