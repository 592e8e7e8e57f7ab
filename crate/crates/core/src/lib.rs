//! Dynamic-scene 4D reconstruction back-end.
//!
//! Given per-pair pointmap predictions, dense optical flow and mobility-labelled
//! point tracks for a monocular video, this crate estimates per-frame motion
//! masks and jointly optimizes depth maps, camera poses and intrinsics. The
//! result is a temporally smooth world-coordinate reconstruction together with
//! lifted 3D trajectories.
//!
//! The pipeline is organised as follows:
//!
//! - [`scene`]: domain types, the strided sliding-window scene graph and the
//!   optimizable [`scene::SceneEstimate`].
//! - [`io`]: the binary tensor container, scene manifests and PLY export.
//! - [`epipolar`]: Sampson error, LMedS fundamental matrix fitting and
//!   correspondence-guided motion masks.
//! - [`geometry`]: unprojection, projection, ego-motion flow, Umeyama alignment
//!   and bilinear sampling.
//! - [`objectives`]: the global alignment, camera movement alignment, camera
//!   trajectory smoothness and point trajectory smoothness losses with
//!   analytic gradients.
//! - [`trajectory`]: track lifting, adaptive-weight smoothing and linear blend
//!   displacement.
//! - [`optim`]: initialization, Adam and the two-stage schedule.
//! - [`eval`]: pose, depth, segmentation, mobility and tracking metrics.
//! - [`synth`]: analytic synthetic scenes with exact ground truth.
//! - [`cli`]: the `scene4d` command line front-end.
//!
//! Pixel convention throughout: `(i, j) = (column, row)` with pixel centres at
//! integer coordinates.

pub mod cli;
pub mod epipolar;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod objectives;
pub mod optim;
pub mod scene;
pub mod synth;
pub mod testing;
pub mod trajectory;

pub use error::{Error, Result};
