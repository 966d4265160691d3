//! Core library for reconstructing, completing and scoring multi-agent
//! football trajectories on a normalized pitch plane.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`geometry`]: pitch coordinate systems, the segment data model,
//!   validation and displacement statistics.
//! - [`projection`]: image-to-pitch homography estimation, per-frame
//!   calibration interpolation and detection projection.
//! - [`imputation`]: gap filling for partially observed trajectories,
//!   combining motion-constrained splines with a masked latent-variable
//!   sequence model.
//! - [`metrics`]: occupancy-grid construction and the spatial/movement
//!   similarity scores used to compare predicted against real play.
//! - [`rollout`]: the policy abstraction, reference baselines, behavior
//!   cloning and closed-loop evaluation from a first-frame context.
//!
//! Everything is deterministic given explicit seeds; no global RNG state
//! is used anywhere.

pub mod geometry;
pub mod imputation;
pub mod metrics;
pub mod projection;
pub mod rollout;

pub(crate) mod tape;
