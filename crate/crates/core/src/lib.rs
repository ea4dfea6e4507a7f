//! Desk-scale laboratory for continual panoptic segmentation.
//!
//! The crate provides everything needed to run class-incremental panoptic
//! experiments on synthetic scenes at CPU speed:
//!
//! - [`panoptic`]: label spaces, panoptic maps, segments, and their invariants;
//! - [`metrics`]: Panoptic Quality and mean IoU with per-class breakdowns;
//! - [`scenes`]: deterministic generator of learnable toy scenes;
//! - [`stream`]: class schedules, overlap/disjoint image streams, label masking;
//! - [`autodiff`]: a small reverse-mode tape over f64 tensors;
//! - [`model`]: a tiny differentiable query-based segmenter with Hungarian
//!   matching, the supervised panoptic loss, and panoptic inference;
//! - [`optim`]: decoupled-weight-decay adaptive-moment updates;
//! - [`future_aware`]: region discovery on unlabeled pixels, pixel-to-region
//!   contrast, known-class repulsion, the combined objective, and the optional
//!   prototype-clustering branch;
//! - [`analysis`]: future-confusion profiles, prototype congruence, and
//!   stability/plasticity trajectories;
//! - [`io`]: lossless containers for maps, datasets, checkpoints, and metrics.

pub mod analysis;
pub mod assign;
pub mod autodiff;
pub mod error;
pub mod future_aware;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod panoptic;
pub mod rng;
pub mod scenes;
pub mod stream;

pub use error::{Error, Result};
