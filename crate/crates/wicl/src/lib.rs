//! wicl — a desk-scale laboratory for learning physical-layer tasks in context.
//!
//! The crate covers the full pipeline:
//!
//! - [`channel`]: cluster-based multipath MIMO channel synthesis and
//!   reproducible trajectory datasets.
//! - [`precoding`]: SINR/rate arithmetic and classical downlink precoding
//!   solvers (MRT, ZF, weighted-MMSE sum-rate ascent, max-min SINR balancing)
//!   that double as label generators.
//! - [`sequence`]: packing complex matrices into real tokens and assembling
//!   demonstration/query sequences for in-context learning.
//! - [`model`]: a causal decoder-only transformer (rotary positions, gated
//!   FFN) with exact reverse-mode gradients, generic over `f32`/`f64`.
//! - [`train`]: joint multi-task training with dynamic loss weighting and a
//!   warmup + cosine learning-rate schedule.
//! - [`eval`]: metric computation and the experiment sweeps (rate vs SNR,
//!   prediction error vs velocity, shots sweeps, held-out SNR).
//! - [`wds`]: the `WDS1` binary dataset format, [`checkpoint`]: model
//!   checkpoints, [`experiment`]: config-driven runs behind the `wicl` binary.
//!
//! Every random quantity is derived from counter-based streams ([`rng`]), so
//! datasets, training runs and reports are bit-reproducible for any thread
//! count.

pub mod channel;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod precoding;
pub mod rng;
pub mod sequence;
pub mod train;
pub mod wds;

pub use error::{Error, Result};
