//! Deformable dilated convolution.
//!
//! A k×k deformable convolution with dilation `d` samples its input at
//! `p + d·r_j + Δ_j(p)` for every output pixel `p` and tap `r_j ∈
//! {-(k-1)/2..=(k-1)/2}²`, where `Δ_j(p)` is a learned displacement in
//! pixels. Samples are read by bilinear interpolation; neighbours outside
//! the image read as zero.
//!
//! Offset fields have `2·k²` channels laid out as `[Δy₀, Δx₀, Δy₁, Δx₁, …]`
//! with taps in row-major order.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, Init, ParamStore};
use crate::ops::ConvSpec;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Dilation rates of the two deformable branches and the kernel sizes of
/// their offset heads (reaching 4 and 7 pixels from the centre).
pub const DEFORM_DILATIONS: [usize; 2] = [3, 6];
pub const OFFSET_CHANNELS: usize = 18;

pub fn offset_head_kernel(dilation: usize) -> Result<usize> {
    match dilation {
        3 => Ok(9),
        6 => Ok(15),
        d => Err(Error::Config(format!(
            "offset heads exist for dilation 3 or 6, not {d}"
        ))),
    }
}

/// Per-pixel tap displacements of a deformable convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T> {
    tensor: Tensor<T>,
    kernel: usize,
}

impl<T: Element> OffsetField<T> {
    pub fn zeros(batch: usize, kernel: usize, h: usize, w: usize) -> Self {
        Self {
            tensor: Tensor::zeros(&[batch, 2 * kernel * kernel, h, w]),
            kernel,
        }
    }

    /// Wraps a (B, 2k², H, W) tensor, checking shape and the [-1, 1] range.
    pub fn new(tensor: Tensor<T>, kernel: usize) -> Result<Self> {
        let (_, c, _, _) = tensor.dims4("OffsetField")?;
        if c != 2 * kernel * kernel {
            return Err(Error::shape("OffsetField", "channels", 2 * kernel * kernel, c));
        }
        if let Some(v) = tensor.data().iter().find(|v| v.abs() > T::one()) {
            return Err(Error::Config(format!("offset {v:?} outside [-1, 1]")));
        }
        Ok(Self { tensor, kernel })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    /// (Δy, Δx) of `tap` at pixel (y, x) of batch item `b`.
    pub fn get(&self, b: usize, tap: usize, y: usize, x: usize) -> (T, T) {
        (self.tensor.at4(b, 2 * tap, y, x), self.tensor.at4(b, 2 * tap + 1, y, x))
    }
}

/// Displacement from the output pixel to where tap (`ki`, `kj`) of a 3×3
/// kernel samples, given its offset.
pub fn tap_displacement(dilation: usize, ki: usize, kj: usize, offset: (f64, f64)) -> (f64, f64) {
    let d = dilation as f64;
    (d * (ki as f64 - 1.0) + offset.0, d * (kj as f64 - 1.0) + offset.1)
}

/// Bilinear read of channel `c` of item `b` at fractional (py, px). Each of
/// the four neighbours outside the image contributes zero.
pub fn bilinear_sample<T: Element>(x: &Tensor<T>, b: usize, c: usize, py: f64, px: f64) -> T {
    let (_, cs, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = &x.data()[(b * cs + c) * h * w..][..h * w];
    T::of(Sample::new(py, px, h, w).read(plane))
}

/// Bilinear sampling geometry of one point.
#[derive(Clone, Copy, Debug)]
/// One bilinear sampling point resolved against the image bounds: the four
/// neighbours' flat indices with their weights and weight derivatives.
/// Out-of-bounds neighbours point at index 0 with all-zero weights.
struct Sample {
    idx: [usize; 4],
    wt: [f64; 4],
    wy: [f64; 4],
    wx: [f64; 4],
}

impl Sample {
    fn new(py: f64, px: f64, h: usize, w: usize) -> Self {
        let (fy, fx) = (py.floor(), px.floor());
        let (y0, x0) = (fy as isize, fx as isize);
        let (ly, lx) = (py - fy, px - fx);
        let (hy, hx) = (1.0 - ly, 1.0 - lx);
        let corners = [
            (y0, x0, hy * hx, -hx, -hy),
            (y0, x0 + 1, hy * lx, -lx, hy),
            (y0 + 1, x0, ly * hx, hx, -ly),
            (y0 + 1, x0 + 1, ly * lx, lx, ly),
        ];
        let mut s = Sample {
            idx: [0; 4],
            wt: [0.0; 4],
            wy: [0.0; 4],
            wx: [0.0; 4],
        };
        for (k, &(y, x, wt, wy, wx)) in corners.iter().enumerate() {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                s.idx[k] = y as usize * w + x as usize;
                s.wt[k] = wt;
                s.wy[k] = wy;
                s.wx[k] = wx;
            }
        }
        s
    }

    #[inline]
    fn read<T: Element>(&self, plane: &[T]) -> f64 {
        (0..4).map(|k| plane[self.idx[k]].f64() * self.wt[k]).sum()
    }
}

struct DeformGeometry {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
    out_channels: usize,
}

impl DeformGeometry {
    fn taps(&self) -> usize {
        self.k * self.k
    }

    /// Sampling points of every (tap, pixel) pair for batch item `b`.
    fn samples<T: Element>(&self, offsets: &Tensor<T>, b: usize) -> Vec<Sample> {
        let (h, w, kk) = (self.h, self.w, self.taps());
        let half = (self.k / 2) as isize;
        let mut out = Vec::with_capacity(kk * h * w);
        for tap in 0..kk {
            let ry = (tap / self.k) as isize - half;
            let rx = (tap % self.k) as isize - half;
            let oy = &offsets.data()[(b * 2 * kk + 2 * tap) * h * w..][..h * w];
            let ox = &offsets.data()[(b * 2 * kk + 2 * tap + 1) * h * w..][..h * w];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let py = (y as isize + ry * self.dilation as isize) as f64 + oy[p].f64();
                    let px = (x as isize + rx * self.dilation as isize) as f64 + ox[p].f64();
                    out.push(Sample::new(py, px, h, w));
                }
            }
        }
        out
    }

    /// Deformable im2col: rows `c·k² + tap`, one column per output pixel.
    fn columns<T: Element>(&self, x: &Tensor<T>, b: usize, samples: &[Sample], cols: &mut [T]) {
        let (hw, kk) = (self.h * self.w, self.taps());
        for c in 0..self.channels {
            let plane = &x.data()[(b * self.channels + c) * hw..][..hw];
            for tap in 0..kk {
                let row = &mut cols[(c * kk + tap) * hw..][..hw];
                let ss = &samples[tap * hw..(tap + 1) * hw];
                for (dst, s) in row.iter_mut().zip(ss) {
                    *dst = T::of(s.read(plane));
                }
            }
        }
    }
}

fn deform_geometry<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    dilation: usize,
    offsets: &Tensor<T>,
) -> Result<DeformGeometry> {
    let (batch, c, h, wd) = x.dims4("deform_conv2d")?;
    let [m, wc, k, k2] = w.shape() else {
        return Err(Error::shape("deform_conv2d", "weight rank", 4, w.shape().len()));
    };
    let (m, k) = (*m, *k);
    if *wc != c || *k2 != k || k % 2 == 0 {
        return Err(Error::shape(
            "deform_conv2d",
            "weight (m, C, k, k), k odd",
            (m, c, k, k),
            w.shape(),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [m] {
            return Err(Error::shape("deform_conv2d", "bias", [m], b.shape()));
        }
    }
    if dilation == 0 {
        return Err(Error::Config("dilation must be positive".into()));
    }
    let expected = [batch, 2 * k * k, h, wd];
    if offsets.shape() != expected {
        return Err(Error::shape(
            "deform_conv2d",
            "offset field (B, 2k², H, W)",
            expected,
            offsets.shape(),
        ));
    }
    Ok(DeformGeometry {
        batch,
        channels: c,
        h,
        w: wd,
        k,
        dilation,
        out_channels: m,
    })
}

impl<'t, T: Element> Var<'t, T> {
    /// Deformable convolution with "same" geometry: output (B, m, H, W).
    pub fn deform_conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        dilation: usize,
        offsets: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let off = offsets.value();
        let geo = deform_geometry(&x, &w, b.as_deref(), dilation, &off)?;
        let (hw, m) = (geo.h * geo.w, geo.out_channels);
        let rows = geo.channels * geo.taps();

        let mut out = Tensor::zeros(&[geo.batch, m, geo.h, geo.w]);
        let mut cols = vec![T::zero(); rows * hw];
        for bi in 0..geo.batch {
            let samples = geo.samples(&off, bi);
            geo.columns(&x, bi, &samples, &mut cols);
            let ob = &mut out.data_mut()[bi * m * hw..(bi + 1) * m * hw];
            T::gemm(
                m,
                rows,
                hw,
                T::one(),
                w.data(),
                rows,
                1,
                &cols,
                hw,
                1,
                T::zero(),
                ob,
                hw,
                1,
            );
            if let Some(b) = &b {
                for oc in 0..m {
                    let bv = b.data()[oc];
                    for v in &mut ob[oc * hw..(oc + 1) * hw] {
                        *v += bv;
                    }
                }
            }
        }

        let need_x = self.requires_grad();
        let need_off = offsets.requires_grad();
        let mut parents = vec![*self, *weight, *offsets];
        parents.extend(bias.copied());
        let has_bias = bias.is_some();
        Ok(self.tape().record("deform_conv2d", out, &parents, move |g| {
            let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
            let mut goff = need_off.then(|| Tensor::zeros(off.shape()));
            let mut gw = Tensor::zeros(w.shape());
            let mut gb = Tensor::zeros(&[m]);
            let mut cols = vec![T::zero(); rows * hw];
            let mut dcols = vec![T::zero(); rows * hw];
            let kk = geo.taps();
            for bi in 0..geo.batch {
                let samples = geo.samples(&off, bi);
                geo.columns(&x, bi, &samples, &mut cols);
                let gbi = &g.data()[bi * m * hw..(bi + 1) * m * hw];
                T::gemm(
                    m,
                    hw,
                    rows,
                    T::one(),
                    gbi,
                    hw,
                    1,
                    &cols,
                    1,
                    hw,
                    T::one(),
                    gw.data_mut(),
                    rows,
                    1,
                );
                for oc in 0..m {
                    gb.data_mut()[oc] += gbi[oc * hw..(oc + 1) * hw].iter().fold(T::zero(), |a, &v| a + v);
                }
                if gx.is_none() && goff.is_none() {
                    continue;
                }
                T::gemm(
                    rows,
                    m,
                    hw,
                    T::one(),
                    w.data(),
                    1,
                    rows,
                    gbi,
                    hw,
                    1,
                    T::zero(),
                    &mut dcols,
                    hw,
                    1,
                );
                for c in 0..geo.channels {
                    let plane_at = (bi * geo.channels + c) * hw;
                    for tap in 0..kk {
                        let drow = &dcols[(c * kk + tap) * hw..][..hw];
                        let ss = &samples[tap * hw..(tap + 1) * hw];
                        for p in 0..hw {
                            let dv = drow[p].f64();
                            if dv == 0.0 {
                                continue;
                            }
                            let sp = &ss[p];
                            if let Some(gx) = gx.as_mut() {
                                let plane = &mut gx.data_mut()[plane_at..plane_at + hw];
                                for k in 0..4 {
                                    plane[sp.idx[k]] += T::of(dv * sp.wt[k]);
                                }
                            }
                            if let Some(goff) = goff.as_mut() {
                                let plane = &x.data()[plane_at..plane_at + hw];
                                let (mut dy, mut dx) = (0.0, 0.0);
                                for k in 0..4 {
                                    let v = plane[sp.idx[k]].f64();
                                    dy += sp.wy[k] * v;
                                    dx += sp.wx[k] * v;
                                }
                                let base = (bi * 2 * kk + 2 * tap) * hw + p;
                                goff.data_mut()[base] += T::of(dv * dy);
                                goff.data_mut()[base + hw] += T::of(dv * dx);
                            }
                        }
                    }
                }
            }
            let mut grads = vec![gx, Some(gw), goff];
            if has_bias {
                grads.push(Some(gb));
            }
            grads
        }))
    }
}

/// Regular convolution predicting an offset field, clipped to [-1, 1] by a
/// hard tanh. Kernel 9 serves dilation 3 and kernel 15 serves dilation 6.
#[derive(Clone, Debug)]
pub struct OffsetHead {
    pub conv: Conv,
    pub dilation: usize,
}

impl OffsetHead {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        dilation: usize,
        init: Init,
    ) -> Result<Self> {
        let k = offset_head_kernel(dilation)?;
        let spec = ConvSpec::new(k, OFFSET_CHANNELS);
        Ok(Self {
            conv: Conv::new(store, rng, name, in_channels, spec, true, init)?,
            dilation,
        })
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.conv.forward(ctx, x)?.hardtanh())
    }
}

/// Outputs of the three reception branches (dilation 1, 3 and 6).
#[derive(Clone, Copy, Debug)]
pub struct TriBranch<'t, T> {
    pub regular: Var<'t, T>,
    pub deform3: Var<'t, T>,
    pub deform6: Var<'t, T>,
}

impl<'t, T> TriBranch<'t, T> {
    pub fn as_array(&self) -> [Var<'t, T>; 3] {
        [self.regular, self.deform3, self.deform6]
    }
}

/// Applies one 3×3 weight and bias through a plain convolution and two
/// deformable convolutions with dilations 3 and 6.
pub fn shared_tri_branch<'t, T: Element>(
    x: &Var<'t, T>,
    weight: &Var<'t, T>,
    bias: Option<&Var<'t, T>>,
    offsets3: &Var<'t, T>,
    offsets6: &Var<'t, T>,
) -> Result<TriBranch<'t, T>> {
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
        return Err(Error::shape("shared_tri_branch", "weight", "(m, C, 3, 3)", ws));
    }
    let spec = ConvSpec::new(3, ws[0]);
    Ok(TriBranch {
        regular: x.conv2d(weight, bias, &spec)?,
        deform3: x.deform_conv2d(weight, bias, DEFORM_DILATIONS[0], offsets3)?,
        deform6: x.deform_conv2d(weight, bias, DEFORM_DILATIONS[1], offsets6)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn two_by_two() -> Tensor<f64> {
        Tensor::from_f64(&[1, 1, 2, 2], &[0., 1., 2., 3.]).unwrap()
    }

    #[test]
    fn sample_at_nodes_and_centres() {
        let x = two_by_two();
        assert_eq!(bilinear_sample(&x, 0, 0, 1.0, 0.0), 2.0);
        assert_eq!(bilinear_sample(&x, 0, 0, 0.5, 0.5), 1.5);
        assert_eq!(bilinear_sample(&x, 0, 0, -5.0, -5.0), 0.0);
        // Half a pixel outside the top edge blends with zero padding.
        assert_eq!(bilinear_sample(&x, 0, 0, -0.5, 1.0), 0.5);
        assert_eq!(bilinear_sample(&x, 0, 0, 1.5, 1.0), 1.5);
    }

    #[test]
    fn offset_field_validates() {
        assert!(OffsetField::new(Tensor::<f32>::zeros(&[1, 18, 4, 4]), 3).is_ok());
        assert!(OffsetField::new(Tensor::<f32>::zeros(&[1, 16, 4, 4]), 3).is_err());
        assert!(OffsetField::new(Tensor::<f32>::full(&[1, 18, 1, 1], 1.5), 3).is_err());
        assert_eq!(
            OffsetField::<f32>::zeros(2, 3, 5, 5).tensor().shape()[1],
            OFFSET_CHANNELS
        );
    }

    #[test]
    fn offset_head_kernels() {
        assert_eq!(offset_head_kernel(3).unwrap(), 9);
        assert_eq!(offset_head_kernel(6).unwrap(), 15);
        assert!(offset_head_kernel(2).is_err());
    }

    #[test]
    fn rejects_offset_channel_mismatch() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let off = tape.constant(Tensor::zeros(&[1, 16, 5, 5]));
        assert!(x.deform_conv2d(&w, None, 3, &off).is_err());
    }

    #[test]
    fn ramp_shift_probe() {
        // Only the centre tap is active; the input is x(i, j) = j.
        let (h, w) = (6, 7);
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, h, w], |i| (i % w) as f64));
        let weight = 2.5;
        let wt = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { weight } else { 0.0 }));
        let mut off = Tensor::zeros(&[1, 18, h, w]);
        for p in 0..h * w {
            off.data_mut()[9 * h * w + p] = 0.5; // Δx of tap 4
        }
        let y = x.deform_conv2d(&wt, None, 3, &tape.constant(off)).unwrap().value();
        for i in 0..h {
            for j in 0..w - 1 {
                let expected = weight * (j as f64 + 0.5);
                assert!((y.at4(0, 0, i, j) - expected).abs() < 1e-12);
            }
        }
    }
}
