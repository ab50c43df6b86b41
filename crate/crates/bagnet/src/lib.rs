//! BAGNet: a two-branch segmentation network for grayscale lesion images,
//! built on a self-contained reverse-mode autodiff engine.
//!
//! The network couples a full-resolution branch with a multi-scale
//! encoder-decoder branch through bidirectional guidance blocks that
//! cross-calibrate the two feature streams with single-channel attention
//! maps. The crate also ships the surrounding apparatus: a training harness
//! (binary cross-entropy + Adam + k-fold cross-validation), segmentation
//! metrics, dataset manifests and a deterministic synthetic-lesion generator
//! so everything is testable without clinical data.
//!
//! See the `examples/` directory for one runnable program per capability,
//! or the `bagnet` binary for the command-line surface.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
