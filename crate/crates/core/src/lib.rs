//! Hybrid sequence engine: Gated DeltaNet layers with a fixed-size matrix
//! memory interleaved with sliding-window attention, distillation losses,
//! and a streaming benchmark harness.
//!
//! All numerics are 64-bit. Layers are plain Rust over [`math::Mat`].

pub mod attention;
pub mod bench;
pub mod deltanet;
pub mod error;
pub mod losses;
pub mod math;
pub mod model;
pub mod verify;

pub use error::{Error, Result};
