//! Volumetric set-prediction engine.
//!
//! End-to-end 3D object detection with detection transformers at desk
//! scale: a reverse-mode tensor substrate, box geometry, Hungarian set
//! losses, three detector variants, patch-wise inference with merging,
//! mAP evaluation, and a deterministic synthetic dataset to exercise it
//! all on a CPU.

pub mod error;
pub mod gradcheck;
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use error::{GeometryError, TensorError};
pub use tensor::{Tape, Var};
