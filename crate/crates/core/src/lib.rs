//! Self-supervised traversability learning.
//!
//! Driven wheel trajectories are projected into the camera image, filtered
//! against stereo depth and filled into a footprint. Positive and negative
//! pixels drawn from that footprint (and from a selected class-agnostic mask
//! proposal) train a small per-cell decoder over frozen dense features with a
//! pixel-level contrastive objective. A running traversability vector turns
//! decoded features into bounded costs, which are projected into a
//! bird's-eye-view grid and checked with an MPPI planner.
//!
//! Module map:
//! - [`geometry`]: camera models, trajectory projection, occlusion filtering,
//!   footprint fill, pixel to BEV transforms.
//! - [`sampling`]: positive/negative pixel sampling and mask selection.
//! - [`features`]: feature maps, their file format, the synthetic encoder and
//!   the dataset manifest.
//! - [`trainer`]: decoder, contrastive losses, EMA vector, training loop and
//!   checkpoints.
//! - [`costmap`]: similarity, cost transform, BEV projection and inpainting.
//! - [`control`]: kinematic rollouts, MPPI and collision evaluation.
//! - [`eval`]: classification metrics and hyperparameter selection.
//! - [`simworld`]: the deterministic synthetic off-road world.
//! - [`cli`]: the `trv` command implementations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod control;
pub mod costmap;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod raster;
pub mod rng;
pub mod sampling;
pub mod simworld;
pub mod trainer;

pub use error::{Result, TrvError};
