//! Image decoding and bilinear resampling for `[H, W, 1]` tensors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear sample of a single-channel `[h, w]` grid at continuous pixel
/// coordinates `(x, y)`; out-of-range reads clamp to the nearest edge.
pub(crate) fn sample_bilinear(data: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let at = |yy: usize, xx: usize| data[yy * w + xx];
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
    let top = lerp(at(y0, x0), at(y0, x1), fx);
    let bottom = lerp(at(y1, x0), at(y1, x1), fx);
    lerp(top, bottom, fy)
}

/// Resizes an `[h, w, 1]` image to `[size, size, 1]` with half-pixel-centre
/// bilinear interpolation.
pub fn resize_bilinear(img: &Tensor, size: usize) -> Result<Tensor> {
    if img.rank() != 3 || img.shape()[2] != 1 {
        return Err(Error::shape("resize_bilinear", format!("{:?}", img.shape())));
    }
    if size == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if h == size && w == size {
        return Ok(img.clone());
    }
    let sy = h as f64 / size as f64;
    let sx = w as f64 / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for oy in 0..size {
        let y = (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..size {
            let x = (ox as f64 + 0.5) * sx - 0.5;
            out.push(sample_bilinear(img.data(), h, w, x, y));
        }
    }
    Tensor::new(vec![size, size, 1], out)
}

/// Decodes a PNG/JPEG, converts to luminance in `[0, 1]`, and resizes to
/// `[size, size, 1]`.
pub fn load_and_resize(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    let data = luma.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    let t = Tensor::new(vec![h as usize, w as usize, 1], data)?;
    resize_bilinear(&t, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full(&[7, 13, 1], 1.0);
        for size in [4, 64, 9] {
            let r = resize_bilinear(&img, size).unwrap();
            assert_eq!(r.shape(), &[size, size, 1]);
            assert!(r.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn upsampled_values_stay_in_range() {
        let img = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 0.25, 0.5]).unwrap();
        let r = resize_bilinear(&img, 8).unwrap();
        assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn unreadable_file_is_error() {
        let err = load_and_resize(Path::new("/nonexistent/file.png"), 8).unwrap_err();
        assert_eq!(err.kind(), "image");
    }
}
