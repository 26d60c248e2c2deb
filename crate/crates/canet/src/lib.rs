//! Confidence-aware camouflaged object detection at desk scale.
//!
//! Two coupled networks are trained together: a segmentation network
//! predicts initial and refined object maps, and a UNet confidence
//! estimator learns the pixel-wise disagreement between prediction and
//! ground truth. The estimated confidence re-weights the segmentation
//! loss so that hard (mostly boundary) pixels get more attention.
//!
//! Everything is self-contained: a tape-based reverse-mode autodiff
//! core, the two networks, the loss family, segmentation metrics
//! (MAE / mean-F / mean-E / S-measure), a procedural camouflage data
//! generator with PPM/PGM I/O, and a deterministic training harness
//! with bit-exact checkpointing.

pub mod checkpoint;
pub mod cod;
pub mod confidence;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
