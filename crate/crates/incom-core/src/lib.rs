//! Numeric foundation shared by the rest of the workspace: a small dense
//! tensor type, a tape-based reverse-mode autodiff engine, the handful of
//! neural-net building blocks the policy needs, Adam, and binary IO helpers.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in f32
//! for training/checkpoints and in f64 for finite-difference gradient checks.

pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod opt;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use scalar::Scalar;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
