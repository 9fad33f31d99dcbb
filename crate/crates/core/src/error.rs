//! Error types shared across the engine.

use thiserror::Error;

/// Errors raised by the tensor substrate.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shapes {lhs:?} and {rhs:?} are not broadcast-compatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("matmul: inner dimensions differ ({lhs:?} x {rhs:?})")]
    InnerDimMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward: loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("conv3d: kernel {kernel:?} larger than padded input {padded:?}")]
    KernelTooLarge {
        kernel: Vec<usize>,
        padded: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Errors raised by geometry operations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeometryError {
    #[error("box extent must be strictly positive, got {extent}")]
    NonPositiveExtent { extent: f64 },
    #[error("box field is not finite")]
    NonFinite,
    #[error("corner form requires min < max per axis, got min {min:?} max {max:?}")]
    InvertedCorners { min: [f64; 3], max: [f64; 3] },
}
