//! Few-shot domain adaptation for flow-based cell instance segmentation.
//!
//! The crate covers the whole experimental loop: synthetic scenes with a
//! controllable covariate shift, a small flow-predicting network, the
//! instance-segmentation and contrastive adaptation objectives, flow
//! following to recover instances, evaluation metrics and a reproducible
//! experiment harness.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ctt;
pub mod error;
pub mod flowfollow;
pub mod geom;
pub mod grid;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pngio;
pub mod synth;
pub mod tiling;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{BBox, FeatureMap, ImageGrid, LabelMask};
