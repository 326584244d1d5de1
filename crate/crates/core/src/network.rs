//! Encoder-decoder assembly and checkpoint I/O.
//!
//! The encoder is the VGG16 convolutional plan with batch norm: stages of
//! (2, 2, 3, 3, 3) conv-BN-ReLU layers of widths w·(1, 2, 4, 8, 8) separated
//! by 2×2 max pooling. The decoder climbs four levels, widths
//! w·(4, 2, 1, 1), merging the skips s4..s1:
//!
//! * `deeppyramid_plus`: PVF at the bottleneck, then DPR + PVF per level;
//! * `pvf_only`: the UNet+ double-conv levels with the same PVF insertions;
//! * `unet_plus`: upsample, concatenate, two conv-BN-ReLU layers per level.
//!
//! A 1×1 convolution maps to class logits, resized to the input size.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::blocks::{Dpr, DprConfig, Pvf, PvfConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::nn::{Conv, ConvBnRelu, Ctx, Init, ParamStore};
use crate::ops::{concat_channels, ConvSpec};
use crate::rng::{self, Domain};
use crate::tensor::{argmax_channels, Element, LabelMap, Tensor};

pub const STAGE_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];
pub const STAGE_MULTIPLIERS: [usize; 5] = [1, 2, 4, 8, 8];
pub const DECODER_MULTIPLIERS: [usize; 4] = [4, 2, 1, 1];
pub const IN_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    DeepPyramidPlus,
    UnetPlus,
    PvfOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::UnetPlus, Variant::PvfOnly, Variant::DeepPyramidPlus];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DeepPyramidPlus => "deeppyramid_plus",
            Variant::UnetPlus => "unet_plus",
            Variant::PvfOnly => "pvf_only",
        }
    }

    fn code(self) -> u32 {
        match self {
            Variant::DeepPyramidPlus => 0,
            Variant::UnetPlus => 1,
            Variant::PvfOnly => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == c)
    }

    pub fn uses_pvf(self) -> bool {
        self != Variant::UnetPlus
    }

    pub fn uses_dpr(self) -> bool {
        self == Variant::DeepPyramidPlus
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown variant {s:?} (expected deeppyramid_plus, unet_plus or pvf_only)"
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub input_size: usize,
    pub base_width: usize,
    pub variant: Variant,
}

impl NetworkConfig {
    /// Full-scale configuration: w = 64, 512×512 inputs.
    pub fn full_scale(variant: Variant, num_classes: usize) -> Self {
        Self {
            num_classes,
            input_size: 512,
            base_width: 64,
            variant,
        }
    }

    /// Desk-scale configuration: w = 8, 64×64 inputs.
    pub fn desk(variant: Variant, num_classes: usize) -> Self {
        Self {
            num_classes,
            input_size: 64,
            base_width: 8,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "input size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        // The bottleneck PVF pools with a 9×9 window over a size/16 map.
        if self.variant.uses_pvf() && self.input_size < 64 {
            return Err(Error::Config(format!(
                "{} needs input size >= 64 for its bottleneck pyramid, got {}",
                self.variant, self.input_size
            )));
        }
        if self.base_width == 0 || !self.base_width.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "base width must be a positive multiple of 8, got {}",
                self.base_width
            )));
        }
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must lie in 2..=256, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn stage_widths(&self) -> [usize; 5] {
        STAGE_MULTIPLIERS.map(|m| m * self.base_width)
    }

    pub fn decoder_widths(&self) -> [usize; 4] {
        DECODER_MULTIPLIERS.map(|m| m * self.base_width)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<Vec<ConvBnRelu>>,
}

impl Encoder {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut rng::Rng, cfg: &NetworkConfig) -> Result<Self> {
        let mut in_ch = IN_CHANNELS;
        let mut stages = Vec::new();
        for (s, (&depth, &width)) in STAGE_DEPTHS.iter().zip(&cfg.stage_widths()).enumerate() {
            let mut layers = Vec::new();
            for l in 0..depth {
                layers.push(ConvBnRelu::new(
                    store,
                    rng,
                    &format!("encoder.stage{}.{l}", s + 1),
                    in_ch,
                    width,
                )?);
                in_ch = width;
            }
            stages.push(layers);
        }
        Ok(Self { stages })
    }

    /// The five pre-pool feature maps s1..s5.
    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let mut skips = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                h = h.max_pool2()?;
            }
            for layer in stage {
                h = layer.forward(ctx, h)?;
            }
            skips.push(h);
        }
        Ok(skips)
    }
}

#[derive(Clone, Debug)]
pub enum LevelBlock {
    DoubleConv(ConvBnRelu, ConvBnRelu),
    Dpr(Dpr),
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub block: LevelBlock,
    pub pvf: Option<Pvf>,
}

impl DecoderLevel {
    fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, dec: Var<'t, T>, skip: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = match &self.block {
            LevelBlock::DoubleConv(a, b) => {
                let s = skip.shape();
                let up = dec.bilinear_resize(s[2], s[3])?;
                let cat = concat_channels(&[up, skip])?;
                b.forward(ctx, a.forward(ctx, cat)?)?
            }
            LevelBlock::Dpr(dpr) => dpr.forward(ctx, dec, skip)?,
        };
        match &self.pvf {
            Some(p) => p.forward(ctx, y),
            None => Ok(y),
        }
    }
}

/// A network structure together with its parameter store.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub cfg: NetworkConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub bottleneck: Option<Pvf>,
    pub levels: Vec<DecoderLevel>,
    pub head: Conv,
}

/// Parameter count of one named module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleCount {
    pub module: String,
    pub params: usize,
}

impl<T: Element> Network<T> {
    /// Builds the network with He-initialized weights drawn from `seed`.
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, Domain::Init, 0);
        let encoder = Encoder::new(&mut store, &mut rng, &cfg)?;
        let widths = cfg.stage_widths();
        let bottleneck = if cfg.variant.uses_pvf() {
            Some(Pvf::new(
                &mut store,
                &mut rng,
                "bottleneck.pvf",
                PvfConfig::new(widths[4]),
            )?)
        } else {
            None
        };
        let mut levels = Vec::new();
        let mut dec_ch = widths[4];
        for (i, &out) in cfg.decoder_widths().iter().enumerate() {
            let skip_ch = widths[3 - i];
            let name = format!("decoder.level{}", i + 1);
            let block = if cfg.variant.uses_dpr() {
                LevelBlock::Dpr(Dpr::new(
                    &mut store,
                    &mut rng,
                    &format!("{name}.dpr"),
                    DprConfig::new(dec_ch, skip_ch, out),
                )?)
            } else {
                LevelBlock::DoubleConv(
                    ConvBnRelu::new(&mut store, &mut rng, &format!("{name}.conv1"), dec_ch + skip_ch, out)?,
                    ConvBnRelu::new(&mut store, &mut rng, &format!("{name}.conv2"), out, out)?,
                )
            };
            let pvf = if cfg.variant.uses_pvf() {
                Some(Pvf::new(
                    &mut store,
                    &mut rng,
                    &format!("{name}.pvf"),
                    PvfConfig::new(out),
                )?)
            } else {
                None
            };
            levels.push(DecoderLevel { block, pvf });
            dec_ch = out;
        }
        let head = Conv::new(
            &mut store,
            &mut rng,
            "head",
            dec_ch,
            ConvSpec::new(1, cfg.num_classes),
            true,
            Init::He,
        )?;
        Ok(Self {
            cfg,
            store,
            encoder,
            bottleneck,
            levels,
            head,
        })
    }

    /// Logits (B, num_classes, S, S) for images (B, 3, S, S).
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let expected = [IN_CHANNELS, self.cfg.input_size, self.cfg.input_size];
        if s.len() != 4 || s[1..] != expected {
            return Err(Error::shape("network", "input", ("B", expected), s));
        }
        let skips = self.encoder.forward(ctx, x)?;
        let mut y = skips[4];
        if let Some(p) = &self.bottleneck {
            y = p.forward(ctx, y)?;
        }
        for (i, level) in self.levels.iter().enumerate() {
            y = level.forward(ctx, y, skips[3 - i])?;
        }
        let logits = self.head.forward(ctx, y)?;
        logits.bilinear_resize(self.cfg.input_size, self.cfg.input_size)
    }

    /// Inference-mode logits without gradient tracking.
    pub fn predict_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, false, false);
        let y = self.forward(&ctx, tape.constant(images.clone()))?;
        Ok((*y.value()).clone())
    }

    /// Per-pixel argmax labels, (B, S, S) or (S, S) for a single image.
    pub fn predict(&self, images: &Tensor<T>) -> Result<LabelMap> {
        argmax_channels(&self.predict_logits(images)?)
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Trainable parameters per module, in build order.
    pub fn param_breakdown(&self) -> Vec<ModuleCount> {
        let mut rows = Vec::new();
        let mut push = |module: String| {
            let params = self.store.param_count_with_prefix(&format!("{module}."));
            rows.push(ModuleCount { module, params });
        };
        for s in 1..=STAGE_DEPTHS.len() {
            push(format!("encoder.stage{s}"));
        }
        if self.bottleneck.is_some() {
            push("bottleneck.pvf".into());
        }
        for (i, level) in self.levels.iter().enumerate() {
            let name = format!("decoder.level{}", i + 1);
            match level.block {
                LevelBlock::Dpr(_) => push(format!("{name}.dpr")),
                LevelBlock::DoubleConv(..) => {
                    push(format!("{name}.conv1"));
                    push(format!("{name}.conv2"));
                }
            }
            if level.pvf.is_some() {
                push(format!("{name}.pvf"));
            }
        }
        push("head".into());
        rows
    }

    /// Builds the structure for `cfg` and loads `values` into it.
    pub fn from_values(cfg: NetworkConfig, values: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        net.store.load_values(values)?;
        Ok(net)
    }
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DPYR";
pub const CHECKPOINT_VERSION: u32 = 1;
const CONFIG_PREFIX: &str = "config.";

/// Serializes named tensors: magic, u32 version, u32 count, then per entry
/// u32 name length, UTF-8 name, u8 rank, u32 dims, little-endian f32 data.
pub fn encode_entries(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut seen = std::collections::HashSet::new();
    for (name, t) in entries {
        if !seen.insert(name.as_str()) {
            return Err(CheckpointError::NameCollision(name.clone()).into());
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated { what: what.to_string() }.into());
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic }.into());
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    let count = r.u32("entry count")? as usize;
    let mut entries: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u32(&format!("name length of entry {i}"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("name of entry {i}"))?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        if entries.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::NameCollision(name).into());
        }
        let rank = r.take(1, &format!("rank of {name}"))?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32(&format!("shape of {name}")).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    if !r.bytes.is_empty() {
        return Err(CheckpointError::TrailingBytes.into());
    }
    Ok(entries)
}

fn config_entries(cfg: &NetworkConfig) -> Vec<(String, Tensor<f32>)> {
    [
        ("num_classes", cfg.num_classes as f32),
        ("input_size", cfg.input_size as f32),
        ("base_width", cfg.base_width as f32),
        ("variant", cfg.variant.code() as f32),
    ]
    .into_iter()
    .map(|(k, v)| (format!("{CONFIG_PREFIX}{k}"), Tensor::scalar(v)))
    .collect()
}

fn parse_config(entries: &[(String, Tensor<f32>)]) -> Result<NetworkConfig> {
    let get = |key: &str| -> Result<u32> {
        let name = format!("{CONFIG_PREFIX}{key}");
        let (_, t) = entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or(CheckpointError::Missing(name.clone()))?;
        match t.data() {
            [v] if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as u32),
            _ => Err(Error::Config(format!("malformed checkpoint field {name}"))),
        }
    };
    let variant = Variant::from_code(get("variant")?)
        .ok_or_else(|| Error::Config("unknown variant code in checkpoint".into()))?;
    let cfg = NetworkConfig {
        num_classes: get("num_classes")? as usize,
        input_size: get("input_size")? as usize,
        base_width: get("base_width")? as usize,
        variant,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Checkpoint bytes: the configuration echo followed by every store entry.
pub fn checkpoint_bytes(net: &Network<f32>) -> Result<Vec<u8>> {
    let mut entries = config_entries(&net.cfg);
    entries.extend(net.store.iter().map(|(n, t, _)| (n.to_string(), t.clone())));
    encode_entries(&entries)
}

pub fn save_checkpoint(path: &Path, net: &Network<f32>) -> Result<()> {
    fs::write(path, checkpoint_bytes(net)?).map_err(|e| Error::io(path, e))
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<Network<f32>> {
    let entries = decode_entries(bytes)?;
    let cfg = parse_config(&entries)?;
    let params: Vec<_> = entries
        .into_iter()
        .filter(|(n, _)| !n.starts_with(CONFIG_PREFIX))
        .collect();
    let net = Network::from_values(cfg, &params)?;
    if params.len() != net.store.len() {
        let extra = params
            .iter()
            .find(|(n, _)| net.store.find(n).is_none())
            .map(|(n, _)| n.clone())
            .unwrap_or_default();
        return Err(Error::Config(format!(
            "checkpoint has an entry unknown to this network: {extra:?}"
        )));
    }
    Ok(net)
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    network_from_bytes(&bytes)
}
