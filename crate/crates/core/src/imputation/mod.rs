//! Trajectory completion for partially observed sequences.
//!
//! Two mechanisms cooperate: short interior gaps are filled with
//! motion-constrained cubic Hermite splines ([`spline_impute`]), longer
//! ones by a masked conditional latent-variable sequence model whose
//! training objective combines a masked reconstruction loss, a KL term
//! against a standard-normal prior and optional smoothness / formation /
//! collision regularizers ([`elbo_loss`], [`train_imputer`]). The router
//! is [`impute`].

mod model;
mod spline;
mod train;

pub use model::{
    decode, distill_step, elbo_loss, encode, ElboBreakdown, GaussianPosterior, GruWeights, ImputerParams,
    LinearWeights,
};
pub use spline::{spline_impute, DEFAULT_MAX_SPLINE_GAP};
pub use train::{impute, mask_segment, train_imputer, Optimizer, TrainConfig};

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::geometry::{NormalizedPoint, Segment};

#[derive(Debug, Error, PartialEq)]
pub enum ImputationError {
    #[error("agent {agent} has {got} observations, need at least 2")]
    InsufficientObservations { agent: usize, got: usize },
    #[error("dimension mismatch: {what}")]
    DimensionError { what: String },
    #[error("numerical instability in the {term} term")]
    NumericalInstability { term: &'static str },
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("invalid configuration: {what}")]
    InvalidConfig { what: String },
    #[error("invalid sequence: {what}")]
    InvalidSequence { what: String },
}

/// A partially observed trajectory tensor with a binary observation mask.
///
/// Unobserved entries are zero-filled; observed entries must be finite and
/// within normalized pitch bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSequence {
    x_obs: Array3<f64>,
    mask: Array2<bool>,
    fps: f64,
}

impl ObservedSequence {
    pub fn new(mut x_obs: Array3<f64>, mask: Array2<bool>, fps: f64) -> Result<Self, ImputationError> {
        let (n, t, c) = x_obs.dim();
        if c != 2 || n == 0 || t == 0 {
            return Err(ImputationError::InvalidSequence {
                what: format!("coordinate tensor has shape {n}x{t}x{c}, expected NxTx2 with N,T >= 1"),
            });
        }
        if mask.dim() != (n, t) {
            return Err(ImputationError::DimensionError {
                what: format!("mask shape {:?} does not match {n}x{t}", mask.dim()),
            });
        }
        if !(fps > 0.0) {
            return Err(ImputationError::InvalidSequence {
                what: format!("fps must be positive, got {fps}"),
            });
        }
        for i in 0..n {
            for s in 0..t {
                if mask[(i, s)] {
                    let (x, y) = (x_obs[(i, s, 0)], x_obs[(i, s, 1)]);
                    if !NormalizedPoint::coords_in_bounds(x, y) {
                        return Err(ImputationError::InvalidSequence {
                            what: format!("observed entry ({x}, {y}) at agent {i}, frame {s} out of bounds"),
                        });
                    }
                } else {
                    x_obs[(i, s, 0)] = 0.0;
                    x_obs[(i, s, 1)] = 0.0;
                }
            }
        }
        Ok(Self { x_obs, mask, fps })
    }

    /// Fully observed sequence from a well-formed segment.
    pub fn from_segment(segment: &Segment) -> Result<Self, ImputationError> {
        let t = segment.frames.len();
        let n = segment.frames.first().map(|f| f.points.len()).unwrap_or(0);
        let mut x = Array3::zeros((n, t, 2));
        for (s, frame) in segment.frames.iter().enumerate() {
            if frame.points.len() != n {
                return Err(ImputationError::InvalidSequence {
                    what: format!("frame {s} has {} agents, expected {n}", frame.points.len()),
                });
            }
            for (i, p) in frame.points.iter().enumerate() {
                x[(i, s, 0)] = p.x;
                x[(i, s, 1)] = p.y;
            }
        }
        Self::new(x, Array2::from_elem((n, t), true), segment.fps)
    }

    /// Copy of this sequence with one agent's frames `start..start + len`
    /// masked out.
    pub fn with_gap(&self, agent: usize, start: usize, len: usize) -> Self {
        let mut mask = self.mask.clone();
        let mut x_obs = self.x_obs.clone();
        for s in start..(start + len).min(self.n_frames()) {
            mask[(agent, s)] = false;
            x_obs[(agent, s, 0)] = 0.0;
            x_obs[(agent, s, 1)] = 0.0;
        }
        Self {
            x_obs,
            mask,
            fps: self.fps,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.x_obs.dim().0
    }

    pub fn n_frames(&self) -> usize {
        self.x_obs.dim().1
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn x_obs(&self) -> &Array3<f64> {
        &self.x_obs
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn is_observed(&self, agent: usize, frame: usize) -> bool {
        self.mask[(agent, frame)]
    }

    pub fn observed_count(&self, agent: usize) -> usize {
        (0..self.n_frames()).filter(|&s| self.mask[(agent, s)]).count()
    }
}

/// Where each entry of a completed sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Observed,
    Spline,
    Model,
    /// Not yet filled; only present in the partial output of the spline
    /// stage, never after [`impute`].
    Unfilled,
}

/// A completed trajectory tensor with per-entry provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedSequence {
    pub x_full: Array3<f64>,
    pub provenance: Array2<Provenance>,
}

impl CompletedSequence {
    pub fn is_complete(&self) -> bool {
        self.provenance.iter().all(|p| *p != Provenance::Unfilled)
    }
}

/// Architecture and loss weights of the latent-variable imputer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// KL weight.
    pub beta: f64,
    pub lambda_smooth: f64,
    pub lambda_form: f64,
    pub lambda_coll: f64,
    /// Pairwise distance (normalized units) under which the collision
    /// hinge activates.
    pub collision_radius: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden_dim: 64,
            beta: 1.0,
            lambda_smooth: 0.1,
            lambda_form: 0.1,
            lambda_coll: 0.1,
            collision_radius: 0.01,
        }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<(), ImputationError> {
        if self.latent_dim == 0 || self.hidden_dim == 0 {
            return Err(ImputationError::InvalidConfig {
                what: "latent_dim and hidden_dim must be at least 1".into(),
            });
        }
        for (name, v) in [
            ("beta", self.beta),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_form", self.lambda_form),
            ("lambda_coll", self.lambda_coll),
        ] {
            if !(v >= 0.0) {
                return Err(ImputationError::InvalidConfig {
                    what: format!("{name} must be non-negative, got {v}"),
                });
            }
        }
        if !(self.collision_radius > 0.0) {
            return Err(ImputationError::InvalidConfig {
                what: format!("collision_radius must be positive, got {}", self.collision_radius),
            });
        }
        Ok(())
    }
}
