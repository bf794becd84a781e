//! Dataset preparation: filename parsing, per-patient deduplication,
//! per-class splitting, manifests, image loading, and augmentation.

pub mod augment;
pub mod image;
mod kermany;
mod manifest;
mod scan;
mod split;

pub use augment::{augment, AffineParams, AugmentConfig};
pub use image::{load_and_resize, resize_bilinear};
pub use kermany::{dedup_per_patient, parse_kermany_name, KermanyName};
pub use manifest::{DatasetManifest, Split};
pub use scan::{patient_overlap, prepare_manifest, Layout};
pub use split::split_per_class;

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub label: String,
    pub patient_id: Option<String>,
    pub image_index: Option<u64>,
}

impl Sample {
    pub fn new(path: impl Into<PathBuf>, label: impl Into<String>) -> Self {
        Sample {
            path: path.into(),
            label: label.into(),
            patient_id: None,
            image_index: None,
        }
    }
}

/// Decoded images held in memory, `[S, S, 1]` each.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub classes: Vec<String>,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Loads and resizes every sample of `split`.
    pub fn from_manifest(manifest: &DatasetManifest, split: Split, size: usize) -> Result<Self> {
        let samples = manifest.samples(split);
        let mut images = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        for s in samples {
            images.push(load_and_resize(&s.path, size)?);
            labels.push(manifest.class_index(&s.label).ok_or_else(|| {
                Error::Data(format!("label {:?} not in class list", s.label))
            })?);
        }
        Ok(ImageSet {
            classes: manifest.classes().to_vec(),
            images,
            labels,
        })
    }
}

/// Mixes a seed with a sequence of indices into an independent seed, so that
/// per-sample random streams do not depend on processing order.
pub fn substream_seed(seed: u64, parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}
