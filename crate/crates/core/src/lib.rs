//! Teaching-assistant knowledge distillation for monocular 3D detection,
//! built end to end on a deterministic synthetic-scene benchmark.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`ops`], [`gradcheck`] — a dense n-d tensor, a
//!   reverse-mode gradient tape with analytic per-op backward rules, and a
//!   finite-difference harness that certifies them. These layers are generic
//!   over the scalar type via [`scalar::Scalar`] (`f32`/`f64`).
//! * [`geometry`] — camera projection, depth binning, voxelization and the
//!   frustum lift/sample ops that move features between image, frustum and
//!   bird's-eye-view (BEV) grids.
//! * [`models`] — the LiDAR teacher, the camera+true-depth teaching
//!   assistant (TA) and the camera-only student, including the spatial
//!   alignment module (SAM) and feature fusion module (FFM).
//! * [`distill`] — the distillation losses: intra-modal (IMD), cross-modal
//!   residual (CMRD), plain cross-modal (CMD) and logit distillation.
//! * [`synthdata`], [`container`] — scene generation, LiDAR raycasting,
//!   camera rendering, and the binary dataset/checkpoint container.
//! * [`train`], [`eval`], [`heatmap`], [`config`] — optimisation schedule,
//!   staged training, rotated-box AP evaluation, PGM heatmap export and the
//!   run configuration surface.
//!
//! The full pipeline runs in double precision; the concrete aliases
//! [`Tensor64`] and [`Tape64`] are what the pipeline layers use.

pub mod config;
pub mod container;
pub mod distill;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod heatmap;
pub mod models;
pub mod ops;
pub mod scalar;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision tensor used by the pipeline layers.
pub type Tensor64 = tensor::Tensor<f64>;
/// Default-precision gradient tape used by the pipeline layers.
pub type Tape64 = tape::GradTape<f64>;
