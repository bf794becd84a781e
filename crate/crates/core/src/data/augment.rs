//! Random flips, zoom, shift, and rotation of square single-channel images.
//!
//! Geometric transforms are applied by inverse mapping every output pixel
//! into the source image, sampling bilinearly and clamping reads that fall
//! outside to the nearest edge pixel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::sample_bilinear;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    /// Zoom factor drawn from `[1 − zoom_range, 1 + zoom_range]`.
    pub zoom_range: f64,
    /// Shift drawn from `±shift_range · extent` per axis.
    pub shift_range: f64,
    /// Rotation drawn from `[0, rotation_degrees)`.
    pub rotation_degrees: f64,
}

impl AugmentConfig {
    /// Both flips, 10% zoom, 10% shift, full-circle rotation.
    pub fn standard() -> Self {
        AugmentConfig {
            hflip: true,
            vflip: true,
            zoom_range: 0.10,
            shift_range: 0.10,
            rotation_degrees: 360.0,
        }
    }

    pub fn none() -> Self {
        AugmentConfig {
            hflip: false,
            vflip: false,
            zoom_range: 0.0,
            shift_range: 0.0,
            rotation_degrees: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::none()
    }
}

/// A concrete transform drawn from an [`AugmentConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub hflip: bool,
    pub vflip: bool,
    pub zoom: f64,
    /// Pixels, positive moves content right.
    pub shift_x: f64,
    /// Pixels, positive moves content down.
    pub shift_y: f64,
    pub rotation_degrees: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            hflip: false,
            vflip: false,
            zoom: 1.0,
            shift_x: 0.0,
            shift_y: 0.0,
            rotation_degrees: 0.0,
        }
    }

    /// Draws each component independently. Disabled components consume no
    /// randomness.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, extent: usize, rng: &mut R) -> Self {
        let mut p = Self::identity();
        if cfg.hflip {
            p.hflip = rng.random_bool(0.5);
        }
        if cfg.vflip {
            p.vflip = rng.random_bool(0.5);
        }
        if cfg.zoom_range > 0.0 {
            p.zoom = rng.random_range(1.0 - cfg.zoom_range..=1.0 + cfg.zoom_range);
        }
        if cfg.shift_range > 0.0 {
            let max = cfg.shift_range * extent as f64;
            p.shift_x = rng.random_range(-max..=max);
            p.shift_y = rng.random_range(-max..=max);
        }
        if cfg.rotation_degrees > 0.0 {
            p.rotation_degrees = rng.random_range(0.0..cfg.rotation_degrees);
        }
        p
    }

    fn is_geometric_identity(&self) -> bool {
        self.zoom == 1.0 && self.shift_x == 0.0 && self.shift_y == 0.0 && self.rotation_degrees == 0.0
    }

    /// Applies flips first, then zoom/rotation about the image centre,
    /// then the shift. `img` is `[S, S, 1]`.
    pub fn apply(&self, img: &Tensor) -> Tensor {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let src = img.data();
        let mut flipped = Vec::with_capacity(src.len());
        for y in 0..h {
            let sy = if self.vflip { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if self.hflip { w - 1 - x } else { x };
                flipped.push(src[sy * w + sx]);
            }
        }
        if self.is_geometric_identity() {
            return Tensor::new(img.shape().to_vec(), flipped).unwrap();
        }

        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (sin, cos) = self.rotation_degrees.to_radians().sin_cos();
        let mut out = Vec::with_capacity(src.len());
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx - self.shift_x;
                let dy = y as f64 - cy - self.shift_y;
                // Inverse rotation, then inverse zoom.
                let rx = cos * dx + sin * dy;
                let ry = -sin * dx + cos * dy;
                out.push(sample_bilinear(&flipped, h, w, rx / self.zoom + cx, ry / self.zoom + cy));
            }
        }
        Tensor::new(img.shape().to_vec(), out).unwrap()
    }
}

/// Draws a transform from `cfg` and applies it.
pub fn augment<R: Rng + ?Sized>(img: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    let params = AffineParams::sample(cfg, img.shape()[0], rng);
    params.apply(img)
}
