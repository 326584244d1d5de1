//! Training-time augmentation. Geometric ops (crop + rotation) share one
//! inverse map: the image is resampled bilinearly, the mask by nearest
//! neighbour, both with replicated borders so no new label can appear.
//! Photometric ops touch the image only.

use rand::Rng as _;

use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::imgproc::{gaussian_blur, luma, sample_clamped};
use crate::rng::Rng;
use crate::tensor::{LabelMap, Tensor};

pub const MAX_ROTATION_DEG: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSpec {
    pub max_rotation_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Side of the crop window relative to the image, drawn uniformly.
    pub crop_scale: (f64, f64),
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub sharpen_prob: f64,
    pub sharpen_amount: (f64, f64),
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            max_rotation_deg: MAX_ROTATION_DEG,
            brightness: 0.7,
            contrast: 0.7,
            saturation: 0.7,
            crop_scale: (0.75, 1.0),
            blur_prob: 0.25,
            blur_sigma: (0.3, 1.2),
            sharpen_prob: 0.25,
            sharpen_amount: (0.2, 1.0),
        }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            crop_scale: (1.0, 1.0),
            blur_prob: 0.0,
            blur_sigma: (0.0, 0.0),
            sharpen_prob: 0.0,
            sharpen_amount: (0.0, 0.0),
        }
    }

    /// Defaults with every strength multiplied by `s` in [0, 1].
    pub fn scaled(s: f64) -> Self {
        let d = Self::default();
        Self {
            max_rotation_deg: d.max_rotation_deg * s,
            brightness: d.brightness * s,
            contrast: d.contrast * s,
            saturation: d.saturation * s,
            crop_scale: (1.0 - (1.0 - d.crop_scale.0) * s, 1.0),
            blur_prob: d.blur_prob * s,
            sharpen_prob: d.sharpen_prob * s,
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("augmentation: {what}")));
        if !(0.0..=MAX_ROTATION_DEG).contains(&self.max_rotation_deg) {
            return bad("rotation must lie in [0, 30] degrees");
        }
        if [self.brightness, self.contrast, self.saturation]
            .iter()
            .any(|&s| s < 0.0)
        {
            return bad("jitter strengths must be >= 0");
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("crop scale must satisfy 0 < lo <= hi <= 1");
        }
        for p in [self.blur_prob, self.sharpen_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.blur_sigma.0 < 0.0 || self.blur_sigma.0 > self.blur_sigma.1 {
            return bad("blur sigma range is invalid");
        }
        if self.sharpen_amount.0 < 0.0 || self.sharpen_amount.0 > self.sharpen_amount.1 {
            return bad("sharpen range is invalid");
        }
        Ok(())
    }
}

fn draw(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Crop window `(top, left, side_h, side_w)` plus rotation in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub top: f64,
    pub left: f64,
    pub scale: f64,
    pub angle_deg: f64,
}

impl Geometry {
    pub const IDENTITY: Geometry = Geometry {
        top: 0.0,
        left: 0.0,
        scale: 1.0,
        angle_deg: 0.0,
    };
}

/// Resamples image and mask through the crop-then-rotate map. Output pixel
/// centres are rotated about the image centre, then mapped into the crop
/// window.
pub fn warp(sample: &SegmentationSample, g: &Geometry) -> Result<SegmentationSample> {
    let (h, w) = (sample.height(), sample.width());
    let plane = h * w;
    let (sin, cos) = g.angle_deg.to_radians().sin_cos();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let src = sample.image.data();
    let mut image = vec![0.0f32; 3 * plane];
    let mut mask = vec![0u8; plane];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let ry = cy + cos * dy - sin * dx;
            let rx = cx + sin * dy + cos * dx;
            let sy = g.top + ry * g.scale - 0.5;
            let sx = g.left + rx * g.scale - 0.5;
            let i = y * w + x;
            for c in 0..3 {
                image[c * plane + i] = sample_clamped(&src[c * plane..(c + 1) * plane], h, w, sy, sx);
            }
            let ny = sy.round().clamp(0.0, (h - 1) as f64) as usize;
            let nx = sx.round().clamp(0.0, (w - 1) as f64) as usize;
            mask[i] = sample.mask.data()[ny * w + nx];
        }
    }
    SegmentationSample::new(
        sample.id.clone(),
        Tensor::from_vec(&[3, h, w], image)?,
        LabelMap::new(&[h, w], mask)?,
        sample.fold,
    )
}

fn jitter(image: &mut Tensor<f32>, brightness: f32, contrast: f32, saturation: f32) {
    let plane = image.shape()[1] * image.shape()[2];
    let d = image.data_mut();
    for v in d.iter_mut() {
        *v = (*v * brightness).max(0.0);
    }
    let mean = (0..plane).map(|i| luma(d, plane, i)).sum::<f32>() / plane as f32;
    for v in d.iter_mut() {
        *v = (mean + contrast * (*v - mean)).max(0.0);
    }
    for i in 0..plane {
        let g = luma(d, plane, i);
        for c in 0..3 {
            let p = &mut d[c * plane + i];
            *p = (g + saturation * (*p - g)).max(0.0);
        }
    }
    for v in d.iter_mut() {
        *v = v.min(1.0);
    }
}

/// Draws one augmentation of `sample`.
pub fn augment(sample: &SegmentationSample, spec: &AugmentationSpec, rng: &mut Rng) -> Result<SegmentationSample> {
    spec.validate()?;
    let (h, w) = (sample.height() as f64, sample.width() as f64);
    let scale = draw(rng, spec.crop_scale);
    let geometry = Geometry {
        top: draw(rng, (0.0, h * (1.0 - scale))),
        left: draw(rng, (0.0, w * (1.0 - scale))),
        scale,
        angle_deg: draw(rng, (-spec.max_rotation_deg, spec.max_rotation_deg)),
    };
    let mut out = if geometry == Geometry::IDENTITY {
        sample.clone()
    } else {
        warp(sample, &geometry)?
    };

    let factor = |rng: &mut Rng, s: f64| draw(rng, (1.0 - s, 1.0 + s)).max(0.0) as f32;
    let (b, c, s) = (
        factor(rng, spec.brightness),
        factor(rng, spec.contrast),
        factor(rng, spec.saturation),
    );
    if (b, c, s) != (1.0, 1.0, 1.0) {
        jitter(&mut out.image, b, c, s);
    }
    if spec.blur_prob > 0.0 && rng.random_bool(spec.blur_prob) {
        out.image = gaussian_blur(&out.image, draw(rng, spec.blur_sigma));
    }
    if spec.sharpen_prob > 0.0 && rng.random_bool(spec.sharpen_prob) {
        let amount = draw(rng, spec.sharpen_amount) as f32;
        let soft = gaussian_blur(&out.image, 1.0);
        for (v, &s) in out.image.data_mut().iter_mut().zip(soft.data()) {
            *v = (*v + amount * (*v - s)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
