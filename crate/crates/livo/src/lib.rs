//! LiDAR-inertial-visual odometry built around a sequential error-state
//! iterated Kalman filter (ESIKF).
//!
//! The estimation loop runs once per camera frame: IMU propagation up to the
//! frame timestamp, a point-to-plane LiDAR update against an incremental
//! point map, and a visual update that minimizes tangent-plane reprojection
//! residuals of features whose depths were associated directly from the
//! LiDAR cloud (no triangulation). Raw LiDAR streams are recombined so every
//! scan ends exactly at a camera timestamp, which is what makes the
//! sequential LiDAR-then-visual update ordering well-defined.
//!
//! The crate also ships a synthetic-world simulator ([`sim`]) that acts as
//! the ground-truth oracle for the whole pipeline, and a [`harness`] module
//! with dataset ingestion, pipeline orchestration and trajectory metrics.
//!
//! See the `examples/` directory for one runnable example per capability,
//! and the `livo` binary for the `run` / `sim` / `eval` command line.

pub mod depth;
pub mod geom;
pub mod harness;
pub mod lidar_map;
pub mod sim;
pub mod state;
pub mod sweep;
pub mod vio;

mod ini;
mod plane;
