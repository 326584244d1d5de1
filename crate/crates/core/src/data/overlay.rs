use std::path::Path;

use image::RgbImage;

use crate::error::{DataError, Error, Result};
use crate::tensor::{argmax_channels, LabelMap, Tensor};

/// Class colors; class 0 (background) is never painted. Classes beyond the
/// table reuse colors 1.. cyclically.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

pub const OVERLAY_ALPHA: f32 = 0.5;

pub enum OverlaySource<'a> {
    Mask(&'a LabelMap),
    /// (1, K, H, W) or (K, H, W) scores; the argmax is painted.
    Logits(&'a Tensor<f32>),
}

fn color(label: u8) -> [u8; 3] {
    let l = label as usize;
    PALETTE[1 + (l - 1) % (PALETTE.len() - 1)]
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Alpha-blends class colors over a (3, H, W) image.
pub fn overlay(image: &Tensor<f32>, mask: &LabelMap) -> Result<RgbImage> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::shape("overlay", "image", "(3, H, W)", image.shape()));
    };
    if mask.shape() != [h, w] {
        return Err(Error::shape("overlay", "mask", [h, w], mask.shape()));
    }
    let plane = h * w;
    let d = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let src = [to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])];
        let label = mask.data()[i];
        if label == 0 {
            return image::Rgb(src);
        }
        let c = color(label);
        image::Rgb(std::array::from_fn(|k| {
            ((1.0 - OVERLAY_ALPHA) * src[k] as f32 + OVERLAY_ALPHA * c[k] as f32).round() as u8
        }))
    }))
}

/// Writes the overlay PNG and returns the painted label map.
pub fn write_mask_overlay(image: &Tensor<f32>, source: OverlaySource<'_>, path: &Path) -> Result<LabelMap> {
    let mask = match source {
        OverlaySource::Mask(m) => m.clone(),
        OverlaySource::Logits(t) => {
            let t = if t.rank() == 3 {
                t.clone().reshape(&[1, t.shape()[0], t.shape()[1], t.shape()[2]])?
            } else {
                t.clone()
            };
            if t.shape()[0] != 1 {
                return Err(Error::shape("write_mask_overlay", "logits batch", 1, t.shape()[0]));
            }
            argmax_channels(&t)?
        }
    };
    overlay(image, &mask)?.save(path).map_err(|e| {
        Error::from(DataError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    })?;
    Ok(mask)
}
