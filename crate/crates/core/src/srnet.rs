//! Spatial-resolution-preserving compression of a feature map to `1×1×C`.
//!
//! Instead of averaging every spatial position equally, each channel gets its
//! own learned `H×W` weighting. This is a depthwise convolution whose kernel
//! covers the whole map: no bias, no activation, no channel mixing.

use crate::error::{Error, Result};
use crate::param::{ParamStore, Parameter};
use crate::tensor::{Padding, Tape, Tensor, Var};

pub const SPATIAL_KERNEL: &str = "srnet/spatial_kernel";

/// Learned per-channel spatial weighting for a fixed `H×W` extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SrCompressor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl SrCompressor {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        SrCompressor {
            height,
            width,
            channels,
        }
    }

    /// Kernel filled with `1/(H·W)` so the untrained compressor equals
    /// global average pooling.
    pub fn uniform_kernel(&self) -> Tensor {
        Tensor::full(
            &[self.height, self.width, self.channels],
            1.0 / (self.height * self.width) as f64,
        )
    }

    pub fn parameter_count(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn register(&self, params: &mut ParamStore) -> Result<()> {
        params.insert(Parameter::new(SPATIAL_KERNEL, self.uniform_kernel(), true))
    }

    /// `out[n,0,0,c] = Σ_{h,w} features[n,h,w,c] · kernel[h,w,c]`.
    pub fn compress(&self, tape: &Tape, features: Var, kernel: Var) -> Result<Var> {
        let shape = tape.shape(features);
        if shape.len() != 4 || shape[1] != self.height || shape[2] != self.width {
            return Err(Error::shape(
                "srnet_compress",
                format!(
                    "compressor built for {}x{} maps, got {shape:?}",
                    self.height, self.width
                ),
            ));
        }
        if shape[3] != self.channels {
            return Err(Error::shape(
                "srnet_compress",
                format!("expected {} channels, got {}", self.channels, shape[3]),
            ));
        }
        tape.depthwise_conv2d(features, kernel, 1, Padding::Valid)
    }
}

/// Global average pooling baseline.
pub fn gap(tape: &Tape, features: Var) -> Result<Var> {
    tape.global_avg_pool(features)
}
