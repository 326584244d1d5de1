//! Small image-space helpers on (3, H, W) f32 planes.

use crate::tensor::Tensor;

/// Separable Gaussian blur with replicated borders; the kernel is
/// truncated at 3σ.
pub(crate) fn gaussian_blur(image: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let src = image.data();
    let mut tmp = vec![0.0f32; src.len()];
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * src[base + y * w + clamp(x as isize + k as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * tmp[base + clamp(y as isize + k as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::from_vec(s, out).expect("shape preserved")
}

/// Bilinear read at continuous pixel coordinates, edges replicated.
pub(crate) fn sample_clamped(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    (1.0 - ly) * ((1.0 - lx) * at(y0, x0) + lx * at(y0, x1)) + ly * ((1.0 - lx) * at(y1, x0) + lx * at(y1, x1))
}

/// Rec. 601 luma of pixel `i`.
pub(crate) fn luma(data: &[f32], plane: usize, i: usize) -> f32 {
    0.299 * data[i] + 0.587 * data[plane + i] + 0.114 * data[2 * plane + i]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_keeps_constants() {
        let img = Tensor::full(&[3, 5, 4], 0.25f32);
        let out = gaussian_blur(&img, 1.3);
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn clamped_sample_reads_nodes() {
        let plane = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(sample_clamped(&plane, 2, 2, 1.0, 0.0), 2.0);
        assert_eq!(sample_clamped(&plane, 2, 2, -4.0, 9.0), 1.0);
        assert_eq!(sample_clamped(&plane, 2, 2, 0.5, 0.5), 1.5);
    }
}
