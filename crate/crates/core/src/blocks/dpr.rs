//! Deformable Pyramid Reception decoder block and Feature Fusion Decision.
//!
//! The upsampled decoder map is concatenated with the encoder skip. Two
//! offset heads (kernels 9 and 15) predict clipped offset fields for the
//! dilation-3 and dilation-6 deformable branches; together with a regular
//! 3×3 branch they share one weight tensor. FFD scores each branch per
//! pixel with a 1×1 convolution, softmaxes the three scores and returns
//! the weighted sum. A 3×3 convolution, layer norm and ReLU follow.

use crate::autograd::Var;
use crate::deform::{shared_tri_branch, OffsetHead, TriBranch, DEFORM_DILATIONS};
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, Init, LayerNorm, ParamStore};
use crate::ops::{concat_channels, ConvSpec};
use crate::rng::Rng;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DprConfig {
    pub decoder_in: usize,
    pub skip: usize,
    pub out: usize,
    /// Initialization of the offset heads.
    pub offset_init: Init,
}

impl DprConfig {
    pub fn new(decoder_in: usize, skip: usize, out: usize) -> Self {
        Self {
            decoder_in,
            skip,
            out,
            offset_init: Init::Zeros,
        }
    }

    pub fn concat_channels(&self) -> usize {
        self.decoder_in + self.skip
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_in == 0 || self.skip == 0 || self.out == 0 {
            return Err(Error::Config(format!("DPR widths must be positive: {self:?}")));
        }
        if self.out > self.concat_channels() {
            return Err(Error::Config(format!(
                "DPR output width {} exceeds its input width {}",
                self.out,
                self.concat_channels()
            )));
        }
        Ok(())
    }
}

/// Pixel-wise soft selection among three feature maps.
#[derive(Clone, Debug)]
pub struct Ffd {
    pub descriptors: [Conv; 3],
}

/// Result of [`Ffd::forward`].
pub struct FfdOutput<'t, T> {
    pub fused: Var<'t, T>,
    /// Softmax weights, (B, 3, H, W).
    pub weights: Var<'t, T>,
}

/// Weighted sum of `branches` with per-pixel softmax weights of `logits`
/// (B, 3, H, W).
pub fn ffd_combine<'t, T: Element>(branches: &[Var<'t, T>], logits: &Var<'t, T>) -> Result<FfdOutput<'t, T>> {
    if branches.len() != 3 {
        return Err(Error::Config(format!(
            "FFD fuses exactly 3 branches, got {}",
            branches.len()
        )));
    }
    let weights = logits.softmax(1)?;
    let mut fused = branches[0].mul_spatial(&weights.slice_channels(0, 1)?)?;
    for (i, b) in branches.iter().enumerate().skip(1) {
        fused = fused.add(&b.mul_spatial(&weights.slice_channels(i, 1)?)?)?;
    }
    Ok(FfdOutput { fused, weights })
}

impl Ffd {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, channels: usize) -> Result<Self> {
        let mk = |store: &mut ParamStore<T>, rng: &mut Rng, i: usize| {
            Conv::new(
                store,
                rng,
                &format!("{name}.descriptor{i}"),
                channels,
                ConvSpec::new(1, 1),
                true,
                Init::He,
            )
        };
        Ok(Self {
            descriptors: [mk(store, rng, 0)?, mk(store, rng, 1)?, mk(store, rng, 2)?],
        })
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, branches: &[Var<'t, T>]) -> Result<FfdOutput<'t, T>> {
        if branches.len() != 3 {
            return Err(Error::Config(format!(
                "FFD fuses exactly 3 branches, got {}",
                branches.len()
            )));
        }
        let shape = branches[0].shape();
        for b in branches {
            if b.shape() != shape {
                return Err(Error::shape("ffd", "branch", &shape, b.shape()));
            }
        }
        let logits: Vec<_> = self
            .descriptors
            .iter()
            .zip(branches)
            .map(|(d, b)| d.forward(ctx, *b))
            .collect::<Result<_>>()?;
        ffd_combine(branches, &concat_channels(&logits)?)
    }

    pub fn param_count(&self) -> usize {
        self.descriptors.iter().map(Conv::param_count).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Dpr {
    pub cfg: DprConfig,
    pub head3: OffsetHead,
    pub head6: OffsetHead,
    /// Weight and bias shared by the three reception branches.
    pub value: Conv,
    pub ffd: Ffd,
    pub post: Conv,
    pub norm: LayerNorm,
}

/// Intermediate values of the reception stage, exposed for inspection.
pub struct Reception<'t, T> {
    pub offsets3: Var<'t, T>,
    pub offsets6: Var<'t, T>,
    pub branches: TriBranch<'t, T>,
    pub weights: Var<'t, T>,
    pub fused: Var<'t, T>,
}

impl Dpr {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, cfg: DprConfig) -> Result<Self> {
        cfg.validate()?;
        let cin = cfg.concat_channels();
        Ok(Self {
            cfg,
            head3: OffsetHead::new(
                store,
                rng,
                &format!("{name}.offset3"),
                cin,
                DEFORM_DILATIONS[0],
                cfg.offset_init,
            )?,
            head6: OffsetHead::new(
                store,
                rng,
                &format!("{name}.offset6"),
                cin,
                DEFORM_DILATIONS[1],
                cfg.offset_init,
            )?,
            value: Conv::new(
                store,
                rng,
                &format!("{name}.value"),
                cin,
                ConvSpec::new(3, cfg.out),
                true,
                Init::He,
            )?,
            ffd: Ffd::new(store, rng, &format!("{name}.ffd"), cfg.out)?,
            post: Conv::new(
                store,
                rng,
                &format!("{name}.post"),
                cfg.out,
                ConvSpec::new(3, cfg.out),
                true,
                Init::He,
            )?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.out, 3)?,
        })
    }

    /// Offset heads, shared tri-branch and FFD on an already concatenated
    /// input.
    pub fn reception<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Reception<'t, T>> {
        let c = x.shape().get(1).copied().unwrap_or(0);
        if c != self.cfg.concat_channels() {
            return Err(Error::shape(
                "dpr",
                "concatenated channels",
                self.cfg.concat_channels(),
                c,
            ));
        }
        let offsets3 = self.head3.forward(ctx, x)?;
        let offsets6 = self.head6.forward(ctx, x)?;
        let w = ctx.param(self.value.weight);
        let b = self.value.bias.map(|b| ctx.param(b));
        let branches = shared_tri_branch(&x, &w, b.as_ref(), &offsets3, &offsets6)?;
        let FfdOutput { fused, weights } = self.ffd.forward(ctx, &branches.as_array())?;
        Ok(Reception {
            offsets3,
            offsets6,
            branches,
            weights,
            fused,
        })
    }

    /// `skip` must have exactly twice the spatial size of `dec`.
    pub fn forward<'t, T: Element>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        dec: Var<'t, T>,
        skip: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (ds, ss) = (dec.shape(), skip.shape());
        if ds.len() != 4 || ss.len() != 4 || ss[2] != 2 * ds[2] || ss[3] != 2 * ds[3] || ss[0] != ds[0] {
            return Err(Error::shape(
                "dpr",
                "skip vs decoder spatial size",
                "skip = 2 × decoder",
                (ds, ss),
            ));
        }
        let up = dec.bilinear_resize(ss[2], ss[3])?;
        let cat = concat_channels(&[up, skip])?;
        let r = self.reception(ctx, cat)?;
        let y = self.post.forward(ctx, r.fused)?;
        Ok(self.norm.forward(ctx, y)?.relu())
    }

    pub fn param_count(&self) -> usize {
        self.head3.conv.param_count()
            + self.head6.conv.param_count()
            + self.value.param_count()
            + self.ffd.param_count()
            + self.post.param_count()
            + 2 * self.cfg.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn config_validation() {
        assert!(DprConfig::new(4, 4, 8).validate().is_ok());
        assert!(DprConfig::new(4, 4, 9).validate().is_err());
        assert!(DprConfig::new(0, 4, 2).validate().is_err());
    }

    #[test]
    fn ffd_rejects_wrong_branch_count() {
        let tape = Tape::<f64>::new();
        let b = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let l = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(ffd_combine(&[b, b], &l).is_err());
    }

    #[test]
    fn ffd_equal_logits_average() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(&[1, 2, 1, 1], 3.0));
        let b = tape.constant(Tensor::full(&[1, 2, 1, 1], 6.0));
        let c = tape.constant(Tensor::full(&[1, 2, 1, 1], 9.0));
        let l = tape.constant(Tensor::full(&[1, 3, 1, 1], 0.4));
        let out = ffd_combine(&[a, b, c], &l).unwrap();
        for &v in out.fused.value().data() {
            assert!((v - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ffd_saturated_logit_selects_branch() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(&[1, 1, 1, 1], 3.0));
        let b = tape.constant(Tensor::full(&[1, 1, 1, 1], 6.0));
        let c = tape.constant(Tensor::full(&[1, 1, 1, 1], 9.0));
        let l = tape.constant(Tensor::from_f64(&[1, 3, 1, 1], &[1000.0, 0.0, 0.0]).unwrap());
        let out = ffd_combine(&[a, b, c], &l).unwrap();
        assert!(out.weights.value().data()[0] > 1.0 - 1e-6);
        assert!((out.fused.value().data()[0] - 3.0).abs() < 1e-6);
    }
}
