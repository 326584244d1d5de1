//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use deeppyramid::rng::{self, Domain};
use deeppyramid::Tensor;

pub fn seeded(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut r = rng::stream(seed, Domain::Test, 0);
    Tensor::from_fn(shape, |_| rng::normal(&mut r))
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}

/// Direct sliding-window cross-correlation with zero padding `pad`,
/// dilation and groups.
pub fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&[f64]>,
    dilation: usize,
    groups: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, _, h, wd] = x.shape().try_into().unwrap();
    let [m, cg, k, _] = w.shape().try_into().unwrap();
    let reach = dilation * (k - 1);
    let (oh, ow) = (h + 2 * pad - reach, wd + 2 * pad - reach);
    let mg = m / groups;
    let mut out = vec![0.0; n * m * oh * ow];
    for bi in 0..n {
        for oc in 0..m {
            let g = oc / mg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[oc]);
                    for ci in 0..cg {
                        let ic = g * cg + ci;
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy + ki * dilation) as isize - pad as isize;
                                let ix = (ox + kj * dilation) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at4(bi, ic, iy as usize, ix as usize) * w.at4(oc, ci, ki, kj);
                            }
                        }
                    }
                    out[((bi * m + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, m, oh, ow], out).unwrap()
}

/// Mean over the in-bounds part of the k×k window centred on each pixel.
pub fn neighbourhood_mean(x: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let r = (k / 2) as isize;
    Tensor::from_fn(&[n, c, h, w], |i| {
        let (px, py, ch, bi) = (i % w, i / w % h, i / (w * h) % c, i / (w * h * c));
        let (mut sum, mut count) = (0.0, 0.0);
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, xx) = (py as isize + dy, px as isize + dx);
                if y >= 0 && xx >= 0 && y < h as isize && xx < w as isize {
                    sum += x.at4(bi, ch, y as usize, xx as usize);
                    count += 1.0;
                }
            }
        }
        sum / count
    })
}

/// Half-pixel bilinear interpolation evaluated one output pixel at a time.
pub fn resize_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let coord = |o: usize, out: usize, inp: usize| {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(inp - 1), s - lo as f64)
    };
    Tensor::from_fn(&[n, c, oh, ow], |i| {
        let (ox, oy, ch, bi) = (i % ow, i / ow % oh, i / (ow * oh) % c, i / (ow * oh * c));
        let (y0, y1, fy) = coord(oy, oh, h);
        let (x0, x1, fx) = coord(ox, ow, w);
        let v = |y, xx| x.at4(bi, ch, y, xx);
        (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
    })
}
