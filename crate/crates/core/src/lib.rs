//! Learned color fiducial markers, end to end: a message-conditioned marker
//! generator, a differentiable board-scene simulator with photometric and
//! geometric imaging artifacts, and a two-stage detector that localizes
//! markers, refines sub-pixel corners and decodes the embedded message.
//!
//! The crate is organized along the pipeline:
//!
//! 1. [`codec`] — binary messages, dictionaries, threshold identification.
//! 2. [`generator`] — message → 32x32 RGB marker pattern network.
//! 3. [`render`] — board scenes, diffuse-ratio shading, GGX specular.
//! 4. [`augment`] — TPS / perspective / radial warps plus photometric stack,
//!    with ground-truth labels recalculated through every warp.
//! 5. [`detector`] — backbone, RPN, RoI align, corner and decoding heads.
//! 6. [`training`] — losses, adaptive clamping, SGD schedule.
//! 7. [`eval`] — AP, decoding accuracy, FP-rate, corner RMSE.
//!
//! All differentiable math runs on the reverse-mode tape in [`tape`].

pub mod augment;
pub mod codec;
pub mod config;
pub mod detector;
pub mod geometry;
pub mod eval;
pub mod generator;
pub mod params;
pub mod records;
pub mod render;
pub mod tape;
pub mod training;

pub use tape::{Grads, Pad, Tape, Tensor, Var};

/// Derive a per-stream RNG seed from a global seed and a stream index.
/// splitmix64-style mixing keeps parallel lanes decorrelated.
pub fn derive_seed(global: u64, stream: u64) -> u64 {
    let mut z = global
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(0x94d049bb133111eb);
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
