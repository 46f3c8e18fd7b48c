//! Geometry-aware novel-instance detection, end to end and from scratch.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — a tape-based reverse-mode autodiff engine over dense
//!   row-major tensors, with exactly the operations the networks here need
//!   (dense layers, 2D/3D convolutions and their transposes, pooling,
//!   losses, SGD/Adam) plus a double-precision gradient checker.
//! * [`geometry`] — rotation matrices, the 6D continuous rotation
//!   parameterization, geodesic distances, and differentiable trilinear
//!   voxel warping.
//! * [`proposals`] — axis-aligned boxes, IoU, a single-scale anchor grid,
//!   oracle-jittered proposal sets, and differentiable ROI cropping.
//! * [`synth`] — a procedural multi-view benchmark: voxel instance models,
//!   an orthographic renderer, template sets with known relative poses, and
//!   cluttered query scenes with exact occlusion accounting.
//! * [`net`] — the detection model: a shared 2D encoder, the 2D-to-3D
//!   mapping, rotation-aligned template aggregation, query-voxel matching
//!   with a learned rotation head, and a voxel decoder for the
//!   reconstruction pretext task.
//! * [`pipeline`] — two-stage training, the average-recall evaluation
//!   harness, sweeps, and report emission.
//! * [`verify`] — self-contained numerical oracles (gradient probes,
//!   rotation/warp fixtures, recall brute force) behind the CLI's
//!   `verify` subcommand and the acceptance tests.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`): training
//! runs in single precision; verification harnesses re-run the same code in
//! double precision. Concrete aliases for the common choices live at the
//! crate root.

pub mod config;
pub mod geometry;
pub mod net;
pub mod pipeline;
pub mod proposals;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod verify;

mod error;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor — the training default.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor — the verification path.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision rotation matrix.
pub type Rotation32 = geometry::RotationMatrix<f32>;
/// Double-precision rotation matrix.
pub type Rotation64 = geometry::RotationMatrix<f64>;
