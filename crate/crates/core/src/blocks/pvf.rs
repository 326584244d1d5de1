//! Pyramid View Fusion.
//!
//! A 1×1 bottleneck to C/4 channels feeds four branches: a global average
//! (broadcast back to H×W) and three stride-1 average pools of increasing
//! size. Every pixel therefore sees a narrow-to-wide view centred on
//! itself. The branches are concatenated back to C channels, fused by a
//! 4-group 3×3 convolution (one group per branch) down to C/2 and a regular
//! 3×3 convolution back to C, then layer-normalized over (C, H, W).

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, Init, LayerNorm, ParamStore};
use crate::ops::{concat_channels, ConvSpec};
use crate::rng::Rng;
use crate::tensor::Element;

pub const PVF_GROUPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PvfConfig {
    pub channels: usize,
    pub pool_kernels: [usize; 3],
}

impl PvfConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            pool_kernels: [3, 5, 9],
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels / 4
    }

    pub fn hidden_channels(&self) -> usize {
        self.channels / 2
    }

    /// C must be a positive multiple of 8 so that both the 4-way split and
    /// the grouped C -> C/2 convolution divide evenly.
    pub fn validate(&self) -> Result<()> {
        if self.channels < 8 || !self.channels.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "PVF channels must be a positive multiple of 8, got {}",
                self.channels
            )));
        }
        let k = self.pool_kernels;
        if k.iter().any(|&k| k % 2 == 0) || !(k[0] < k[1] && k[1] < k[2]) {
            return Err(Error::Config(format!(
                "PVF pool kernels must be odd and strictly increasing, got {k:?}"
            )));
        }
        Ok(())
    }
}

/// Stride-1 average pooling branch; output has the input's spatial size.
pub fn pyramid_branch<'t, T: Element>(x: &Var<'t, T>, k: usize) -> Result<Var<'t, T>> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("pyramid branch kernel must be odd, got {k}")));
    }
    x.avg_pool(k, 1)
}

#[derive(Clone, Debug)]
pub struct Pvf {
    pub cfg: PvfConfig,
    pub bottleneck: Conv,
    pub grouped: Conv,
    pub fuse: Conv,
    pub norm: LayerNorm,
}

impl Pvf {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, cfg: PvfConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            cfg,
            bottleneck: Conv::new(
                store,
                rng,
                &format!("{name}.bottleneck"),
                c,
                ConvSpec::new(1, cfg.bottleneck_channels()),
                true,
                Init::He,
            )?,
            grouped: Conv::new(
                store,
                rng,
                &format!("{name}.grouped"),
                c,
                ConvSpec::new(3, cfg.hidden_channels()).with_groups(PVF_GROUPS),
                true,
                Init::He,
            )?,
            fuse: Conv::new(
                store,
                rng,
                &format!("{name}.fuse"),
                cfg.hidden_channels(),
                ConvSpec::new(3, c),
                true,
                Init::He,
            )?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), c, 3)?,
        })
    }

    /// The four pyramid branches computed from the bottleneck output, in
    /// order [global, pool k₀, pool k₁, pool k₂].
    pub fn branches<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<[Var<'t, T>; 4]> {
        let shape = x.shape();
        let (h, w) = (shape[2], shape[3]);
        let kmax = self.cfg.pool_kernels[2];
        if h < kmax / 2 || w < kmax / 2 {
            return Err(Error::shape(
                "pvf",
                "spatial extent",
                format!(">= {}", kmax / 2),
                (h, w),
            ));
        }
        let z = self.bottleneck.forward(ctx, x)?;
        let global = z.global_avg_pool()?.bilinear_resize(h, w)?;
        let [k0, k1, k2] = self.cfg.pool_kernels;
        Ok([
            global,
            pyramid_branch(&z, k0)?,
            pyramid_branch(&z, k1)?,
            pyramid_branch(&z, k2)?,
        ])
    }

    /// Fused map before layer normalization.
    pub fn fused<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let c = x.shape().get(1).copied().unwrap_or(0);
        if c != self.cfg.channels {
            return Err(Error::shape("pvf", "channels", self.cfg.channels, c));
        }
        let cat = concat_channels(&self.branches(ctx, x)?)?;
        let y = self.grouped.forward(ctx, cat)?;
        self.fuse.forward(ctx, y)
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.fused(ctx, x)?;
        self.norm.forward(ctx, y)
    }

    pub fn param_count(&self) -> usize {
        let c = self.cfg.channels;
        self.bottleneck.param_count() + self.grouped.param_count() + self.fuse.param_count() + 2 * c
    }
}
