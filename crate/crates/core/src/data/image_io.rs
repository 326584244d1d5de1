use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{DataError, Error, Result};
use crate::tensor::{LabelMap, Tensor};

fn decode_err(path: &Path, e: impl std::fmt::Display) -> Error {
    DataError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
    .into()
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a (3, H, W) image in [0, 1] as 8-bit RGB PNG.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::shape("write_image", "image", "(3, H, W)", image.shape()));
    };
    let plane = h * w;
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([quantize(d[i]), quantize(d[plane + i]), quantize(d[2 * plane + i])])
    });
    img.save(path).map_err(|e| decode_err(path, e))
}

/// Reads any 8-bit image as (3, H, W) in [0, 1].
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| decode_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes a label map as a single-channel PNG whose pixel values are the
/// label ids.
pub fn write_mask(path: &Path, mask: &LabelMap) -> Result<()> {
    if mask.shape().len() != 2 {
        return Err(Error::shape("write_mask", "mask", "(H, W)", mask.shape()));
    }
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .ok_or_else(|| Error::shape("write_mask", "buffer", "H*W bytes", mask.data().len()))?;
    img.save(path).map_err(|e| decode_err(path, e))
}

pub fn read_mask(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| decode_err(path, e))?;
    if img.color() != image::ColorType::L8 {
        return Err(decode_err(path, "mask must be an 8-bit single-channel image"));
    }
    let img = img.to_luma8();
    LabelMap::new(&[img.height() as usize, img.width() as usize], img.into_raw())
}
