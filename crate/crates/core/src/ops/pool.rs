use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Window bounds of average pooling, clipped to the image.
#[derive(Clone, Copy)]
struct PoolGeometry {
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl PoolGeometry {
    fn new(h: usize, w: usize, k: usize, stride: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(Error::Config(format!("avg_pool: kernel {k}, stride {stride}")));
        }
        let pad = if stride == 1 {
            if k.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "avg_pool: stride-1 pooling needs an odd kernel, got {k}"
                )));
            }
            (k - 1) / 2
        } else {
            0
        };
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::shape(
                "avg_pool",
                "padded input",
                format!(">= {k}"),
                (h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(Self {
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Half-open in-bounds input range covered by output index `o`.
    fn span(&self, o: usize, extent: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.k as isize) as usize).min(extent);
        (lo, hi)
    }
}

impl<'t, T: Element> Var<'t, T> {
    /// k×k average pooling with stride `stride`. Stride 1 uses "same"
    /// padding; padded positions are left out of the mean.
    pub fn avg_pool(&self, k: usize, stride: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4("avg_pool")?;
        let geo = PoolGeometry::new(h, w, k, stride)?;
        let (hw, ohw) = (h * w, geo.oh * geo.ow);
        let mut out = Tensor::zeros(&[b, c, geo.oh, geo.ow]);
        for plane in 0..b * c {
            let src = &x.data()[plane * hw..(plane + 1) * hw];
            let dst = &mut out.data_mut()[plane * ohw..(plane + 1) * ohw];
            for oy in 0..geo.oh {
                let (y0, y1) = geo.span(oy, h);
                for ox in 0..geo.ow {
                    let (x0, x1) = geo.span(ox, w);
                    let mut acc = T::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += src[yy * w + xx];
                        }
                    }
                    dst[oy * geo.ow + ox] = acc / T::of(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        Ok(self.tape().record("avg_pool", out, &[*self], move |g| {
            let mut gx = Tensor::zeros(&[b, c, h, w]);
            for plane in 0..b * c {
                let gsrc = &g.data()[plane * ohw..(plane + 1) * ohw];
                let gdst = &mut gx.data_mut()[plane * hw..(plane + 1) * hw];
                for oy in 0..geo.oh {
                    let (y0, y1) = geo.span(oy, h);
                    for ox in 0..geo.ow {
                        let (x0, x1) = geo.span(ox, w);
                        let share = gsrc[oy * geo.ow + ox] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                gdst[yy * w + xx] += share;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Per-channel spatial mean, shaped (B, C, 1, 1).
    pub fn global_avg_pool(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4("global_avg_pool")?;
        let hw = h * w;
        let n = T::of(hw as f64);
        let out = Tensor::from_fn(&[b, c, 1, 1], |p| {
            x.data()[p * hw..(p + 1) * hw].iter().fold(T::zero(), |acc, &v| acc + v) / n
        });
        Ok(self.tape().record("global_avg_pool", out, &[*self], move |g| {
            vec![Some(Tensor::from_fn(&[b, c, h, w], |i| g.data()[i / hw] / n))]
        }))
    }

    /// 2×2 max pooling with stride 2. Ties go to the first element in
    /// row-major order.
    pub fn max_pool2(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4("max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool2", "spatial extent", "even H and W", (h, w)));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let mut argmax = vec![0usize; b * c * oh * ow];
        for plane in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = plane * h * w;
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out.data_mut()[o] = x.data()[best];
                    argmax[o] = best;
                }
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape().record("max_pool2", out, &[*self], move |g| {
            let mut gx = Tensor::zeros(&shape);
            for (o, &src) in argmax.iter().enumerate() {
                gx.data_mut()[src] += g.data()[o];
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn avg_pool_excludes_padding() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap());
        let y = x.avg_pool(3, 1).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 5.0);
        assert_eq!(y.data()[0], 3.0);
    }

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 5, 4], 5.0));
        for k in [1, 3, 5, 9] {
            let y = x.avg_pool(k, 1).unwrap().value();
            assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-6));
        }
    }

    #[test]
    fn strided_pool_rejects_oversized_kernel() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(x.avg_pool(5, 2).is_err());
        assert!(x.avg_pool(4, 1).is_err());
    }

    #[test]
    fn global_pool_is_mean() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| (i + 1) as f64));
        let y = x.global_avg_pool().unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn max_pool2_basic() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap(), true);
        let y = x.max_pool2().unwrap();
        assert_eq!(y.value().data(), &[4.0]);
        tape.backward(y.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0., 0., 0., 1.]);
        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(odd.max_pool2().is_err());
    }
}
