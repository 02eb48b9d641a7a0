//! Samples, preprocessing, patch and clip extraction, manifests and
//! synthetic datasets.

mod clips;
mod manifest;
mod patches;
mod preprocess;
pub mod synthetic;

pub use clips::{make_clips, subtract_median_background, ClipSet, ClipWindow, DEFAULT_CLIP_LEN};
pub use manifest::{export_dataset, group_videos, load_image, save_png, Manifest, ManifestEntry, Split};
pub use patches::{extract_patches, reassemble, resize, PatchGrid};
pub use preprocess::{gcn_l1, minmax_denormalize, minmax_normalize, random_rotation, rotate, Preprocess, GCN_EPSILON};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// One image with its label (0 normal, 1 anomalous).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub label: u8,
}

/// Stacks sample images into `[N, H, W, C]`.
pub fn stack_images(samples: &[Sample]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let refs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack(&refs)
}

/// Rejects a training set containing anything but label 0.
pub fn ensure_normal_only(samples: &[Sample]) -> Result<()> {
    match samples.iter().find(|s| s.label != 0) {
        Some(s) => Err(Error::invalid(format!(
            "training data must be normal only; {} is labelled {}",
            s.id, s.label
        ))),
        None => Ok(()),
    }
}

pub fn ids(samples: &[Sample]) -> Vec<String> {
    samples.iter().map(|s| s.id.clone()).collect()
}

pub fn labels(samples: &[Sample]) -> Vec<u8> {
    samples.iter().map(|s| s.label).collect()
}
