//! Stride-1 2-D cross-correlation with dilation and groups, lowered to GEMM
//! through an im2col buffer.

use std::ops::Range;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `dilation * (kernel - 1) / 2` zeros on each side; preserves H and W.
    Same,
    Explicit(usize),
}

/// Kernel size, dilation, output channels and groups of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(kernel: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            dilation: 1,
            out_channels,
            groups: 1,
            padding: Padding::Same,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => self.dilation * (self.kernel - 1) / 2,
            Padding::Explicit(p) => p,
        }
    }

    pub fn validate(&self, in_channels: usize) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.dilation == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::Config(format!("degenerate conv spec {self:?}")));
        }
        if !in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "groups = {} must divide in_channels = {in_channels} and out_channels = {}",
                self.groups, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self, in_channels: usize) -> [usize; 4] {
        [self.out_channels, in_channels / self.groups, self.kernel, self.kernel]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.dilation * (self.kernel - 1);
        let (ph, pw) = (h + 2 * self.pad(), w + 2 * self.pad());
        if ph <= span || pw <= span {
            return Err(Error::shape("conv2d", "padded input", format!("> {span}"), (ph, pw)));
        }
        Ok((ph - span, pw - span))
    }

    pub fn param_count(&self, in_channels: usize, bias: bool) -> usize {
        self.weight_shape(in_channels).iter().product::<usize>() + if bias { self.out_channels } else { 0 }
    }
}

/// Geometry of one im2col lowering.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lowering {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub dilation: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Lowering {
    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    /// For tap offset `kj` (already scaled by dilation and shifted by pad),
    /// the range of output columns whose input column is in bounds.
    fn valid_range(&self, shift: isize, extent: usize, out: usize) -> (usize, usize) {
        let lo = (-shift).max(0) as usize;
        let hi = ((extent as isize - shift).max(0) as usize).min(out);
        (lo.min(hi), hi)
    }

    /// Output rows per lowering band, sized so one band of columns stays
    /// around a megabyte.
    fn band_rows(&self) -> usize {
        const TARGET: usize = 1 << 18;
        (TARGET / (self.rows() * self.ow).max(1)).clamp(1, self.oh)
    }

    /// Output-row bands covering the whole output.
    fn bands(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        let step = self.band_rows();
        (0..self.oh).step_by(step).map(move |lo| lo..(lo + step).min(self.oh))
    }

    /// Fills `cols` (rows × band columns) from a (channels, h, w) plane for
    /// the output rows in `band`.
    pub fn im2col<T: Element>(&self, x: &[T], cols: &mut [T], band: Range<usize>) {
        let (k, hw) = (self.k, self.h * self.w);
        let bcols = band.len() * self.ow;
        for c in 0..self.channels {
            let plane = &x[c * hw..(c + 1) * hw];
            for ki in 0..k {
                let sy = (ki * self.dilation) as isize - self.pad as isize;
                for kj in 0..k {
                    let sx = (kj * self.dilation) as isize - self.pad as isize;
                    let row = &mut cols[((c * k + ki) * k + kj) * bcols..][..bcols];
                    let (xlo, xhi) = self.valid_range(sx, self.w, self.ow);
                    for (r, oy) in band.clone().enumerate() {
                        let dst = &mut row[r * self.ow..(r + 1) * self.ow];
                        let iy = oy as isize + sy;
                        if iy < 0 || iy >= self.h as isize || xlo >= xhi {
                            dst.fill(T::zero());
                            continue;
                        }
                        dst[..xlo].fill(T::zero());
                        dst[xhi..].fill(T::zero());
                        let src = iy as usize * self.w;
                        let from = (xlo as isize + sx) as usize;
                        dst[xlo..xhi].copy_from_slice(&plane[src + from..src + from + (xhi - xlo)]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`Lowering::im2col`]: accumulates a band of `cols` into a
    /// plane.
    pub fn col2im<T: Element>(&self, cols: &[T], x: &mut [T], band: Range<usize>) {
        let (k, hw) = (self.k, self.h * self.w);
        let bcols = band.len() * self.ow;
        for c in 0..self.channels {
            let plane = &mut x[c * hw..(c + 1) * hw];
            for ki in 0..k {
                let sy = (ki * self.dilation) as isize - self.pad as isize;
                for kj in 0..k {
                    let sx = (kj * self.dilation) as isize - self.pad as isize;
                    let row = &cols[((c * k + ki) * k + kj) * bcols..][..bcols];
                    let (xlo, xhi) = self.valid_range(sx, self.w, self.ow);
                    if xlo >= xhi {
                        continue;
                    }
                    for (r, oy) in band.clone().enumerate() {
                        let iy = oy as isize + sy;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &row[r * self.ow + xlo..r * self.ow + xhi];
                        let base = iy as usize * self.w + (xlo as isize + sx) as usize;
                        for (d, &v) in plane[base..base + (xhi - xlo)].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

struct ConvGeometry {
    batch: usize,
    in_channels: usize,
    groups: usize,
    group_out: usize,
    lowering: Lowering,
}

fn geometry(
    x: &Tensor<impl Element>,
    w: &Tensor<impl Element>,
    b: Option<&Tensor<impl Element>>,
    spec: &ConvSpec,
) -> Result<ConvGeometry> {
    let (batch, c, h, wd) = x.dims4("conv2d")?;
    spec.validate(c)?;
    let expected = spec.weight_shape(c);
    if w.shape() != expected {
        return Err(Error::shape("conv2d", "weight (m, C/g, k, k)", expected, w.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape("conv2d", "bias (m)", [spec.out_channels], b.shape()));
        }
    }
    let (oh, ow) = spec.output_hw(h, wd)?;
    Ok(ConvGeometry {
        batch,
        in_channels: c,
        groups: spec.groups,
        group_out: spec.out_channels / spec.groups,
        lowering: Lowering {
            channels: c / spec.groups,
            h,
            w: wd,
            k: spec.kernel,
            dilation: spec.dilation,
            pad: spec.pad(),
            oh,
            ow,
        },
    })
}

/// Forward convolution on plain tensors.
pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let geo = geometry(x, w, b, spec)?;
    let low = geo.lowering;
    let (hw, ohw, rows) = (low.h * low.w, low.cols(), low.rows());
    let m = spec.out_channels;
    let mut out = Tensor::zeros(&[geo.batch, m, low.oh, low.ow]);
    let mut cols = vec![
        T::zero();
        if low.is_pointwise() {
            0
        } else {
            rows * low.band_rows() * low.ow
        }
    ];
    for bi in 0..geo.batch {
        for g in 0..geo.groups {
            let xg = &x.data()[(bi * geo.in_channels + g * low.channels) * hw..][..low.channels * hw];
            let wg = &w.data()[g * geo.group_out * rows..][..geo.group_out * rows];
            let og = &mut out.data_mut()[(bi * m + g * geo.group_out) * ohw..][..geo.group_out * ohw];
            if low.is_pointwise() {
                T::gemm(
                    geo.group_out,
                    rows,
                    ohw,
                    T::one(),
                    wg,
                    rows,
                    1,
                    xg,
                    ohw,
                    1,
                    T::zero(),
                    og,
                    ohw,
                    1,
                );
                continue;
            }
            for band in low.bands() {
                let bcols = band.len() * low.ow;
                low.im2col(xg, &mut cols[..rows * bcols], band.clone());
                let at = band.start * low.ow;
                let og_band = &mut og[at..(geo.group_out - 1) * ohw + at + bcols];
                T::gemm(
                    geo.group_out,
                    rows,
                    bcols,
                    T::one(),
                    wg,
                    rows,
                    1,
                    &cols,
                    bcols,
                    1,
                    T::zero(),
                    og_band,
                    ohw,
                    1,
                );
            }
        }
        if let Some(b) = b {
            for oc in 0..m {
                let bv = b.data()[oc];
                for v in &mut out.data_mut()[(bi * m + oc) * ohw..][..ohw] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution given the output gradient. Returns
/// (d input if requested, d weight, d bias).
pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    spec: &ConvSpec,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let geo = geometry(x, w, None::<&Tensor<T>>, spec).expect("validated in forward");
    let low = geo.lowering;
    let (hw, ohw, rows) = (low.h * low.w, low.cols(), low.rows());
    let m = spec.out_channels;
    let mut gx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[m]);
    let band_len = if low.is_pointwise() {
        0
    } else {
        rows * low.band_rows() * low.ow
    };
    let mut cols = vec![T::zero(); band_len];
    let mut dcols = vec![T::zero(); if need_input { band_len } else { 0 }];

    for bi in 0..geo.batch {
        for g_idx in 0..geo.groups {
            let xg = &x.data()[(bi * geo.in_channels + g_idx * low.channels) * hw..][..low.channels * hw];
            let gg = &g.data()[(bi * m + g_idx * geo.group_out) * ohw..][..geo.group_out * ohw];
            let gwg = &mut gw.data_mut()[g_idx * geo.group_out * rows..][..geo.group_out * rows];
            let wg = &w.data()[g_idx * geo.group_out * rows..][..geo.group_out * rows];
            let mut gxg = gx.as_mut().map(|gx| {
                &mut gx.data_mut()[(bi * geo.in_channels + g_idx * low.channels) * hw..][..low.channels * hw]
            });

            if low.is_pointwise() {
                // dW (mg × rows) += G (mg × ohw) · Xᵀ (ohw × rows)
                T::gemm(
                    geo.group_out,
                    ohw,
                    rows,
                    T::one(),
                    gg,
                    ohw,
                    1,
                    xg,
                    1,
                    ohw,
                    T::one(),
                    gwg,
                    rows,
                    1,
                );
                if let Some(gxg) = gxg {
                    // dX (rows × ohw) += Wᵀ · G
                    T::gemm(
                        rows,
                        geo.group_out,
                        ohw,
                        T::one(),
                        wg,
                        1,
                        rows,
                        gg,
                        ohw,
                        1,
                        T::one(),
                        gxg,
                        ohw,
                        1,
                    );
                }
                continue;
            }
            for band in low.bands() {
                let bcols = band.len() * low.ow;
                let at = band.start * low.ow;
                let gband = &gg[at..(geo.group_out - 1) * ohw + at + bcols];
                low.im2col(xg, &mut cols[..rows * bcols], band.clone());
                T::gemm(
                    geo.group_out,
                    bcols,
                    rows,
                    T::one(),
                    gband,
                    ohw,
                    1,
                    &cols,
                    1,
                    bcols,
                    T::one(),
                    gwg,
                    rows,
                    1,
                );
                if let Some(gxg) = gxg.as_deref_mut() {
                    let dc = &mut dcols[..rows * bcols];
                    T::gemm(
                        rows,
                        geo.group_out,
                        bcols,
                        T::one(),
                        wg,
                        1,
                        rows,
                        gband,
                        ohw,
                        1,
                        T::zero(),
                        dc,
                        bcols,
                        1,
                    );
                    low.col2im(dc, gxg, band.clone());
                }
            }
        }
        for oc in 0..m {
            let s = g.data()[(bi * m + oc) * ohw..][..ohw]
                .iter()
                .fold(T::zero(), |acc, &v| acc + v);
            gb.data_mut()[oc] += s;
        }
    }
    (gx, gw, gb)
}

impl<'t, T: Element> Var<'t, T> {
    /// Convolution of a (B, C, H, W) input with a (m, C/g, k, k) weight.
    pub fn conv2d(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>, spec: &ConvSpec) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let out = conv2d_forward(&x, &w, b.as_deref(), spec)?;
        let need_input = self.requires_grad();
        let spec = *spec;
        let mut parents = vec![*self, *weight];
        parents.extend(bias.copied());
        let has_bias = bias.is_some();
        Ok(self.tape().record("conv2d", out, &parents, move |g| {
            let (gx, gw, gb) = conv2d_backward(&x, &w, g, &spec, need_input);
            let mut grads = vec![gx, Some(gw)];
            if has_bias {
                grads.push(Some(gb));
            }
            grads
        }))
    }
}
