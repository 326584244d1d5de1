use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Source taps for one output coordinate under half-pixel alignment:
/// `src = (dst + 0.5) * in / out - 0.5`, clamped at the low edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn taps(out: usize, input: usize) -> Vec<Tap> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

impl<'t, T: Element> Var<'t, T> {
    /// Bilinear resize of a (B, C, H, W) tensor. Same-size resizes return
    /// the input values unchanged.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4("bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", "output size", ">= 1", (out_h, out_w)));
        }
        if (out_h, out_w) == (h, w) {
            let out = (*x).clone();
            return Ok(self
                .tape()
                .record("bilinear_resize", out, &[*self], |g| vec![Some(g.clone())]));
        }
        let ty = taps(out_h, h);
        let tx = taps(out_w, w);
        let (hw, ohw) = (h * w, out_h * out_w);
        let mut out = Tensor::zeros(&[b, c, out_h, out_w]);
        for plane in 0..b * c {
            let src = &x.data()[plane * hw..(plane + 1) * hw];
            let dst = &mut out.data_mut()[plane * ohw..(plane + 1) * ohw];
            for (oy, py) in ty.iter().enumerate() {
                let fy = T::of(py.frac);
                for (ox, px) in tx.iter().enumerate() {
                    let fx = T::of(px.frac);
                    let top = src[py.lo * w + px.lo] * (T::one() - fx) + src[py.lo * w + px.hi] * fx;
                    let bot = src[py.hi * w + px.lo] * (T::one() - fx) + src[py.hi * w + px.hi] * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        Ok(self.tape().record("bilinear_resize", out, &[*self], move |g| {
            let mut gx = Tensor::zeros(&[b, c, h, w]);
            for plane in 0..b * c {
                let gsrc = &g.data()[plane * ohw..(plane + 1) * ohw];
                let gdst = &mut gx.data_mut()[plane * hw..(plane + 1) * hw];
                for (oy, py) in ty.iter().enumerate() {
                    let fy = T::of(py.frac);
                    for (ox, px) in tx.iter().enumerate() {
                        let fx = T::of(px.frac);
                        let gv = gsrc[oy * out_w + ox];
                        let (top, bot) = (gv * (T::one() - fy), gv * fy);
                        gdst[py.lo * w + px.lo] += top * (T::one() - fx);
                        gdst[py.lo * w + px.hi] += top * fx;
                        gdst[py.hi * w + px.lo] += bot * (T::one() - fx);
                        gdst[py.hi * w + px.hi] += bot * fx;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}
