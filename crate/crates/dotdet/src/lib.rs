//! Dense tiny-dot detection toolkit.
//!
//! Detecting many tiny, low-contrast dots in textured grayscale imagery is
//! dominated by nuisance variation: per-image gain differences, background
//! texture, and dot-like clutter. This crate builds a small, fully
//! verifiable pipeline around one stabilizing device — the exponential
//! moving average — applied at three points:
//!
//! 1. **Adaptive augmentation** ([`augment`]): per-image brightness /
//!    contrast / noise parameters derived from the gap between the image's
//!    own statistics and an EMA reference over the stream ([`stats`]).
//! 2. **Embedding stabilization** ([`stabilize`]): consistency losses that
//!    pull spatially grouped embeddings toward EMA cluster, global, and
//!    stacked means, with analytic gradients.
//! 3. **Contextual refinement** ([`context`]): an EMA reference over
//!    ROI-pooled context embeddings of expanded boxes, a consistency loss,
//!    and a merged object+context representation.
//!
//! Around that core sit a procedural scene generator ([`scenegen`]), a
//! minimal trainable point detector exercising the combined objective
//! ([`harness`]), an evaluation / ablation pipeline ([`evalkit`]), and a
//! self-check module with independent oracles ([`verify`]).
//!
//! All numerics are `f64` and every code path is deterministic given its
//! seed: reruns produce byte-identical datasets, snapshots, and metrics.

pub mod augment;
pub mod context;
pub mod error;
pub mod evalkit;
pub mod harness;
pub mod rng;
pub mod scenegen;
pub mod stabilize;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use stats::{EmaScalarPair, ImageBuffer, Region, ScalarStats};
