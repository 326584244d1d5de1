//! Channel concatenation and slicing.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Concatenates (B, C_i, H, W) tensors along the channel dimension.
pub fn concat_channels<'t, T: Element>(xs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Config("concat_channels needs at least one input".into()))?;
    let values: Vec<_> = xs.iter().map(|v| v.value()).collect();
    let (b, _, h, w) = values[0].dims4("concat_channels")?;
    let mut widths = Vec::with_capacity(xs.len());
    for v in &values {
        let (vb, vc, vh, vw) = v.dims4("concat_channels")?;
        if (vb, vh, vw) != (b, h, w) {
            return Err(Error::shape(
                "concat_channels",
                "batch/spatial dims",
                (b, h, w),
                (vb, vh, vw),
            ));
        }
        widths.push(vc);
    }
    let total: usize = widths.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(b * total * hw);
    for bi in 0..b {
        for (v, &c) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[bi * c * hw..(bi + 1) * c * hw]);
        }
    }
    let out = Tensor::from_vec(&[b, total, h, w], out)?;
    Ok(first.tape().record("concat_channels", out, xs, move |g| {
        let mut grads: Vec<Vec<T>> = widths.iter().map(|&c| Vec::with_capacity(b * c * hw)).collect();
        let mut at = 0;
        for _ in 0..b {
            for (dst, &c) in grads.iter_mut().zip(&widths) {
                dst.extend_from_slice(&g.data()[at..at + c * hw]);
                at += c * hw;
            }
        }
        grads
            .into_iter()
            .zip(&widths)
            .map(|(d, &c)| Some(Tensor::from_vec(&[b, c, h, w], d).unwrap()))
            .collect()
    }))
}

impl<'t, T: Element> Var<'t, T> {
    /// Channels `start..start + len` of a (B, C, H, W) tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4("slice_channels")?;
        if start + len > c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                "channel range",
                format!("within 0..{c}"),
                start..start + len,
            ));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            out.extend_from_slice(&x.data()[(bi * c + start) * hw..(bi * c + start + len) * hw]);
        }
        let out = Tensor::from_vec(&[b, len, h, w], out)?;
        Ok(self.tape().record("slice_channels", out, &[*self], move |g| {
            let mut gx = Tensor::zeros(&[b, c, h, w]);
            for bi in 0..b {
                gx.data_mut()[(bi * c + start) * hw..(bi * c + start + len) * hw]
                    .copy_from_slice(&g.data()[bi * len * hw..(bi + 1) * len * hw]);
            }
            vec![Some(gx)]
        }))
    }
}
