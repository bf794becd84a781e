//! Dual-backbone ensemble classifier for retinal OCT images.
//!
//! Two convolutional backbones see the same input; their final feature maps
//! are concatenated along channels, compressed to `1×1×C` by a learned
//! per-channel spatial weighting, routed through a capsule layer (C
//! one-dimensional capsules → 10 sixteen-dimensional capsules), and
//! classified by a dropout + dense tail.
//!
//! Everything runs on a small reverse-mode differentiation engine over
//! `f64` tensors in channels-last layout.

pub mod capsule;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod param;
pub mod srnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
