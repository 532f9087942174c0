//! Toolkit for N-dimensional to M-dimensional segmentation networks with
//! projective skip-connections.
//!
//! - [`shapes`]: architecture configuration and the shape rules.
//! - [`tensor`]: dense tensors, kernels and reverse-mode autodiff.
//! - [`netbuild`]: graph construction, forward pass, checkpoints.
//! - [`synthdata`]: synthetic volumes with en-face ground truth.
//! - [`train`]: Dice loss, Adam, the training loop.
//! - [`metrics`]: Dice, HD95, Wilcoxon signed-rank, tiled evaluation.
//! - [`config`]: flat `key = value` configuration files.
//! - [`rng`]: portable SplitMix64 generator with normal draws.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod metrics;
pub mod netbuild;
pub mod rng;
pub mod shapes;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use netbuild::{build, NetError, NetGraph, ParamStore};
pub use shapes::{ArchConfig, InputExtent, ShapeError, Variant};
pub use tensor::{Scalar, Tape, Tensor, TensorError, Var};
