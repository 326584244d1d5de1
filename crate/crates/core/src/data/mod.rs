//! Samples, the synthetic scene generator and on-disk datasets.

mod image_io;
mod manifest;
mod overlay;
mod synth;

pub use image_io::{read_image, read_mask, write_image, write_mask};
pub use manifest::{write_dataset, DatasetManifest, ManifestRow, CLASSES_FILE};
pub use overlay::{overlay, write_mask_overlay, OverlaySource, OVERLAY_ALPHA, PALETTE};
pub use synth::{class_census, generate_sample, generate_synthetic, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

/// One image with its label mask. The image is (3, H, W) in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: LabelMap,
    pub fold: usize,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: LabelMap, fold: usize) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || mask.shape() != [s[1], s[2]] {
            return Err(Error::shape(
                "SegmentationSample",
                "image/mask",
                "(3, H, W) with (H, W) mask",
                (s, mask.shape()),
            ));
        }
        if !image.all_finite() {
            return Err(Error::Config("sample image contains non-finite values".into()));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
            fold,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// Stacks samples into a (B, 3, H, W) image batch and a (B, H, W) mask.
pub fn collate(samples: &[&SegmentationSample]) -> Result<(Tensor<f32>, LabelMap)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("cannot collate an empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::shape("collate", "image", &shape, s.image.shape()));
        }
        data.extend_from_slice(s.image.data());
    }
    let images = Tensor::from_vec(&[samples.len(), shape[0], shape[1], shape[2]], data)?;
    let masks = LabelMap::stack(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
    Ok((images, masks))
}
