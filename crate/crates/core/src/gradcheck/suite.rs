//! The finite-difference suites behind the `gradcheck` command: every
//! differentiable primitive on at least three random shapes, the deformable
//! operators, both blocks end to end and the training loss.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use super::{finite_diff_check, project, GradCheckConfig, GradCheckReport};
use crate::autograd::{Tape, Var};
use crate::blocks::{Dpr, DprConfig, Pvf, PvfConfig};
use crate::deform::{shared_tri_branch, OffsetHead, OFFSET_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamStore};
use crate::ops::{concat_channels, conv2d_forward, BnStats, ConvSpec, Padding};
use crate::rng::{self, Domain, Rng};
use crate::tensor::{LabelMap, Tensor};
use crate::train::ce_log_dice_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Tensor,
    Deform,
    Pvf,
    Dpr,
    Loss,
}

impl Suite {
    pub const NAMES: [&'static str; 6] = ["all", "tensor", "deform", "pvf", "dpr", "loss"];

    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "tensor" => Suite::Tensor,
            "deform" => Suite::Deform,
            "pvf" => Suite::Pvf,
            "dpr" => Suite::Dpr,
            "loss" => Suite::Loss,
            _ => {
                return Err(Error::Config(format!(
                    "unknown gradcheck module {s:?}; expected one of {}",
                    Suite::NAMES.join("|")
                )))
            }
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [
            Suite::All,
            Suite::Tensor,
            Suite::Deform,
            Suite::Pvf,
            Suite::Dpr,
            Suite::Loss,
        ]
        .iter()
        .position(|s| s == self)
        .unwrap_or(0);
        f.write_str(Suite::NAMES[i])
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Scales every analytic gradient by 1.5; the suite must then fail.
    pub sabotage: bool,
}

type CaseFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

struct Case {
    suite: Suite,
    name: String,
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
    max_coords: Option<usize>,
}

impl Case {
    fn new<F>(suite: Suite, name: impl Into<String>, inputs: Vec<Tensor<f64>>, f: F) -> Self
    where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
    {
        Self {
            suite,
            name: name.into(),
            inputs,
            f: Box::new(f),
            max_coords: None,
        }
    }

    fn subsample(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| std * rng::normal(rng))
}

/// Values in ±[lo, hi] with a random sign.
fn signed_band(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// A case over the block's inputs followed by every trainable parameter of
/// `store`, bound into the forward pass through [`Ctx::bind`].
fn module_case<F>(suite: Suite, name: String, store: ParamStore<f64>, inputs: Vec<Tensor<f64>>, forward: F) -> Case
where
    F: for<'t> Fn(&Ctx<'t, '_, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
{
    let n_in = inputs.len();
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let mut all = inputs;
    all.extend(ids.iter().map(|&id| store.get(id).clone()));
    Case::new(suite, name, all, move |tape, v| {
        let ctx = Ctx::new(tape, &store, true, false);
        for (&id, var) in ids.iter().zip(&v[n_in..]) {
            ctx.bind(id, *var)?;
        }
        forward(&ctx, &v[..n_in])
    })
}

/// Uniform values in [-a, a] kept at least `margin` away from every kink.
fn away_from(rng: &mut Rng, shape: &[usize], a: f64, kinks: &[f64], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.random_range(-a..a);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            break v;
        }
    })
}

fn tensor_cases(rng: &mut Rng, seed: u64) -> Result<Vec<Case>> {
    let s = Suite::Tensor;
    let mut cases = Vec::new();

    let convs: [(&[usize], ConvSpec); 4] = [
        (&[1, 3, 5, 5], ConvSpec::new(3, 2)),
        (&[2, 4, 6, 5], ConvSpec::new(3, 4).with_groups(2).with_dilation(2)),
        (&[1, 8, 4, 4], ConvSpec::new(3, 8).with_groups(4)),
        (&[2, 3, 4, 6], ConvSpec::new(1, 5)),
    ];
    for (shape, spec) in convs {
        let w = normal(rng, &spec.weight_shape(shape[1]), 0.5);
        let b = normal(rng, &[spec.out_channels], 0.5);
        let name = format!(
            "conv2d {:?} k{} d{} g{}",
            shape, spec.kernel, spec.dilation, spec.groups
        );
        cases.push(Case::new(s, name, vec![normal(rng, shape, 1.0), w, b], move |_, v| {
            project(&v[0].conv2d(&v[1], Some(&v[2]), &spec)?, seed)
        }));
    }
    let spec = ConvSpec::new(3, 2).with_padding(Padding::Explicit(0));
    cases.push(Case::new(
        s,
        "conv2d [1, 2, 5, 6] k3 valid",
        vec![normal(rng, &[1, 2, 5, 6], 1.0), normal(rng, &spec.weight_shape(2), 0.5)],
        move |_, v| project(&v[0].conv2d(&v[1], None, &spec)?, seed),
    ));

    for (shape, k, stride) in [
        ([1, 2, 5, 5], 3, 1),
        ([2, 1, 6, 4], 5, 1),
        ([1, 3, 9, 9], 9, 1),
        ([1, 2, 6, 6], 3, 2),
    ] {
        cases.push(Case::new(
            s,
            format!("avg_pool {shape:?} k{k} s{stride}"),
            vec![normal(rng, &shape, 1.0)],
            move |_, v| project(&v[0].avg_pool(k, stride)?, seed),
        ));
    }
    for shape in [[1, 2, 3, 3], [2, 3, 4, 5], [1, 1, 1, 7]] {
        cases.push(Case::new(
            s,
            format!("global_avg_pool {shape:?}"),
            vec![normal(rng, &shape, 1.0)],
            move |_, v| project(&v[0].global_avg_pool()?, seed),
        ));
    }
    for (shape, oh, ow) in [
        ([1, 2, 2, 2], 4, 4),
        ([1, 1, 5, 4], 3, 7),
        ([2, 2, 1, 1], 3, 2),
        ([1, 1, 4, 4], 8, 8),
    ] {
        cases.push(Case::new(
            s,
            format!("bilinear_resize {shape:?} -> {oh}x{ow}"),
            vec![normal(rng, &shape, 1.0)],
            move |_, v| project(&v[0].bilinear_resize(oh, ow)?, seed),
        ));
    }
    for shape in [[1, 1, 2, 2], [2, 3, 4, 6], [1, 2, 6, 4]] {
        cases.push(Case::new(
            s,
            format!("max_pool2 {shape:?}"),
            vec![normal(rng, &shape, 1.0)],
            move |_, v| project(&v[0].max_pool2()?, seed),
        ));
    }
    for (a, b) in [(1, 2), (3, 1), (2, 2)] {
        let shapes = [[2, a, 3, 4], [2, b, 3, 4]];
        cases.push(Case::new(
            s,
            format!("concat/slice {a}+{b} channels"),
            vec![normal(rng, &shapes[0], 1.0), normal(rng, &shapes[1], 1.0)],
            move |_, v| {
                let cat = concat_channels(&[v[0], v[1]])?;
                let tail = cat.slice_channels(a, b)?;
                project(&concat_channels(&[cat, tail])?, seed)
            },
        ));
    }
    for shape in [vec![7], vec![2, 3, 4], vec![1, 2, 3, 3]] {
        cases.push(Case::new(
            s,
            format!("relu {shape:?}"),
            vec![away_from(rng, &shape, 2.0, &[0.0], 0.01)],
            move |_, v| project(&v[0].relu(), seed),
        ));
        cases.push(Case::new(
            s,
            format!("hardtanh {shape:?}"),
            vec![away_from(rng, &shape, 2.0, &[-1.0, 1.0], 0.01)],
            move |_, v| project(&v[0].hardtanh(), seed),
        ));
    }
    for (shape, dim) in [(vec![5], 0), (vec![2, 3, 4], 1), (vec![1, 3, 2, 2], 1), (vec![2, 4], 1)] {
        cases.push(Case::new(
            s,
            format!("softmax {shape:?} dim{dim}"),
            vec![normal(rng, &shape, 1.5)],
            move |_, v| project(&v[0].softmax(dim)?, seed),
        ));
    }
    for (shape, last_n) in [([2, 3, 4, 4], 3), ([1, 4, 3, 3], 2), ([2, 2, 3, 5], 1)] {
        let c = shape[1];
        cases.push(Case::new(
            s,
            format!("layer_norm {shape:?} last{last_n}"),
            vec![
                normal(rng, &shape, 1.0),
                uniform(rng, &[c], 0.5, 1.5),
                normal(rng, &[c], 0.5),
            ],
            move |_, v| project(&v[0].layer_norm(last_n, Some(&v[1]), Some(&v[2]))?, seed),
        ));
    }
    for shape in [[2, 3, 3, 3], [4, 2, 2, 2], [1, 2, 4, 5]] {
        let c = shape[1];
        let running = BnStats::new(c);
        cases.push(Case::new(
            s,
            format!("batch_norm {shape:?}"),
            vec![
                normal(rng, &shape, 1.0),
                uniform(rng, &[c], 0.5, 1.5),
                normal(rng, &[c], 0.5),
            ],
            move |_, v| project(&v[0].batch_norm(&v[1], &v[2], &running, true)?.0, seed),
        ));
    }
    for shape in [[1, 2, 3, 3], [2, 3, 2, 4], [1, 1, 4, 1]] {
        let map = [shape[0], 1, shape[2], shape[3]];
        cases.push(Case::new(
            s,
            format!("arith {shape:?}"),
            vec![
                normal(rng, &shape, 1.0),
                normal(rng, &shape, 1.0),
                normal(rng, &map, 1.0),
                normal(rng, &[shape[1]], 1.0),
            ],
            move |_, v| {
                let y = v[0].mul(&v[1])?.sub(&v[0].scale(0.3))?.add(&v[1])?;
                let y = y.mul_spatial(&v[2])?.add_channel_bias(&v[3])?;
                project(&y, seed)?.add(&y.mean())
            },
        ));
    }
    Ok(cases)
}

/// Offsets of magnitude in [0.3, 0.7]: every tap then samples strictly
/// inside an interpolation cell, with margin for the perturbation step.
fn interior_offsets(rng: &mut Rng, b: usize, h: usize, w: usize) -> Tensor<f64> {
    signed_band(rng, &[b, OFFSET_CHANNELS, h, w], 0.3, 0.7)
}

fn deform_cases(rng: &mut Rng, seed: u64) -> Result<Vec<Case>> {
    let s = Suite::Deform;
    let mut cases = Vec::new();
    for (shape, m, d) in [
        ([1, 2, 5, 5], 2, 1),
        ([2, 3, 6, 6], 2, 3),
        ([1, 2, 8, 7], 3, 6),
        ([1, 1, 4, 4], 1, 6),
    ] {
        let inputs = vec![
            normal(rng, &shape, 1.0),
            normal(rng, &[m, shape[1], 3, 3], 0.5),
            interior_offsets(rng, shape[0], shape[2], shape[3]),
            normal(rng, &[m], 0.5),
        ];
        cases.push(Case::new(
            s,
            format!("deform_conv2d {shape:?} m{m} d{d}"),
            inputs,
            move |_, v| project(&v[0].deform_conv2d(&v[1], Some(&v[3]), d, &v[2])?, seed),
        ));
    }

    for (shape, d) in [([1, 2, 6, 6], 3), ([1, 2, 8, 8], 6), ([2, 1, 5, 5], 3)] {
        let mut store = ParamStore::<f64>::new();
        let head = OffsetHead::new(&mut store, rng, "head", shape[1], d, Init::Zeros)?;
        let k = head.conv.spec.kernel;
        // Small weights keep most pre-activations inside (-1, 1); one bias
        // pushes its channel past the clip to exercise the flat region.
        // Draws with a pre-activation near the clip points are rejected.
        let bias = head.conv.bias.expect("offset heads carry a bias");
        let x = normal(rng, &shape, 1.0);
        loop {
            let w = normal(rng, &[OFFSET_CHANNELS, shape[1], k, k], 0.03);
            let mut b = uniform(rng, &[OFFSET_CHANNELS], -0.5, 0.5);
            b.data_mut()[0] = 3.0;
            let pre = conv2d_forward(&x, &w, Some(&b), &head.conv.spec)?;
            if pre.data().iter().all(|v| (v.abs() - 1.0).abs() > 1e-2) {
                *store.get_mut(head.conv.weight) = w;
                *store.get_mut(bias) = b;
                break;
            }
        }
        cases.push(module_case(
            s,
            format!("offset_head {shape:?} d{d}"),
            store,
            vec![x],
            move |ctx, x| project(&head.forward(ctx, x[0])?, seed),
        ));
    }

    for (shape, m) in [([1, 2, 7, 7], 2), ([1, 3, 8, 8], 1), ([2, 1, 6, 6], 2)] {
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let inputs = vec![
            normal(rng, &shape, 1.0),
            normal(rng, &[m, shape[1], 3, 3], 0.5),
            normal(rng, &[m], 0.5),
            interior_offsets(rng, b, h, w),
            interior_offsets(rng, b, h, w),
        ];
        cases.push(Case::new(
            s,
            format!("shared_tri_branch {shape:?} m{m}"),
            inputs,
            move |_, v| {
                let t = shared_tri_branch(&v[0], &v[1], Some(&v[2]), &v[3], &v[4])?;
                let [a, b, c] = t.as_array();
                project(&concat_channels(&[a, b, c])?, seed)
            },
        ));
    }
    Ok(cases)
}

/// Perturbs every trainable parameter so zero-initialized biases and unit
/// norm gains become generic values.
fn jitter_params(store: &mut ParamStore<f64>, rng: &mut Rng, std: f64) {
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += std * rng::normal(rng);
        }
    }
}

fn pvf_cases(rng: &mut Rng, seed: u64) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (shape, max_coords) in [([1, 8, 8, 8], 48), ([2, 8, 5, 6], 24)] {
        let mut store = ParamStore::<f64>::new();
        let pvf = Pvf::new(&mut store, rng, "pvf", PvfConfig::new(shape[1]))?;
        jitter_params(&mut store, rng, 0.1);
        let case = module_case(
            Suite::Pvf,
            format!("pvf_forward {shape:?}"),
            store,
            vec![normal(rng, &shape, 1.0)],
            move |ctx, x| project(&pvf.forward(ctx, x[0])?, seed),
        );
        cases.push(case.subsample(max_coords));
    }
    Ok(cases)
}

/// Smallest distance of any offset magnitude to the nearest integer.
fn offset_margin(t: &Tensor<f64>) -> f64 {
    t.data()
        .iter()
        .map(|v| (v - v.round()).abs())
        .fold(f64::INFINITY, f64::min)
}

fn dpr_cases(rng: &mut Rng, seed: u64) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (dec, skip, out, max_coords) in [([1, 4, 4, 4], [1, 4, 8, 8], 4, 48), ([1, 2, 3, 3], [1, 6, 6, 6], 3, 24)] {
        let mut store = ParamStore::<f64>::new();
        let dpr = Dpr::new(&mut store, rng, "dpr", DprConfig::new(dec[1], skip[1], out))?;
        jitter_params(&mut store, rng, 0.1);
        let (x_dec, x_skip) = (normal(rng, &dec, 1.0), normal(rng, &skip, 1.0));
        // Offset heads: biases of magnitude 0.5 plus weights shrunk until
        // every offset magnitude sits in [0.2, 0.8], away from the
        // non-differentiable cell edges of bilinear sampling.
        for head in [&dpr.head3, &dpr.head6] {
            let bias = head.conv.bias.expect("offset heads carry a bias");
            *store.get_mut(bias) = signed_band(rng, &[OFFSET_CHANNELS], 0.5, 0.5 + 1e-9);
        }
        let weights = [dpr.head3.conv.weight, dpr.head6.conv.weight];
        let base: Vec<_> = weights.iter().map(|&id| store.get(id).clone()).collect();
        let mut scale = 1.0;
        loop {
            for (&id, w) in weights.iter().zip(&base) {
                *store.get_mut(id) = w.map(|v| v * scale);
            }
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, true, false);
            let up = tape.constant(x_dec.clone()).bilinear_resize(skip[2], skip[3])?;
            let cat = concat_channels(&[up, tape.constant(x_skip.clone())])?;
            let r = dpr.reception(&ctx, cat)?;
            if offset_margin(&r.offsets3.value()) >= 0.2 && offset_margin(&r.offsets6.value()) >= 0.2 {
                break;
            }
            scale *= 0.5;
        }
        let case = module_case(
            Suite::Dpr,
            format!("dpr_forward dec {dec:?} skip {skip:?} out {out}"),
            store,
            vec![x_dec, x_skip],
            move |ctx, x| project(&dpr.forward(ctx, x[0], x[1])?, seed),
        );
        cases.push(case.subsample(max_coords));
    }
    Ok(cases)
}

fn loss_cases(rng: &mut Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (shape, alpha) in [
        ([2, 3, 4, 4], 0.5),
        ([1, 2, 5, 3], 0.0),
        ([1, 4, 3, 3], 1.0),
        ([2, 3, 3, 2], 0.25),
    ] {
        let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let labels = LabelMap::new(
            &[b, h, w],
            (0..b * h * w).map(|_| rng.random_range(0..k) as u8).collect(),
        )?;
        cases.push(Case::new(
            Suite::Loss,
            format!("ce_log_dice_loss {shape:?} alpha {alpha}"),
            vec![normal(rng, &shape, 1.5)],
            move |_, v| ce_log_dice_loss(&v[0], &labels, alpha),
        ));
    }
    Ok(cases)
}

fn build_cases(suite: Suite, seed: u64) -> Result<Vec<Case>> {
    let mut rng = rng::stream(seed, Domain::GradCheck, 2);
    let mut cases = Vec::new();
    if suite.includes(Suite::Tensor) {
        cases.extend(tensor_cases(&mut rng, seed)?);
    }
    if suite.includes(Suite::Deform) {
        cases.extend(deform_cases(&mut rng, seed)?);
    }
    if suite.includes(Suite::Pvf) {
        cases.extend(pvf_cases(&mut rng, seed)?);
    }
    if suite.includes(Suite::Dpr) {
        cases.extend(dpr_cases(&mut rng, seed)?);
    }
    if suite.includes(Suite::Loss) {
        cases.extend(loss_cases(&mut rng)?);
    }
    Ok(cases)
}

/// Runs the finite-difference cases of `suite` in `f64`.
pub fn run_suite(suite: Suite, opts: &SuiteOptions) -> Result<Vec<(Suite, GradCheckReport)>> {
    let sabotage = opts.sabotage;
    build_cases(suite, opts.seed)?
        .into_iter()
        .map(|case| {
            let cfg = GradCheckConfig {
                max_coords: case.max_coords,
                seed: opts.seed,
                ..GradCheckConfig::default()
            };
            let f = &case.f;
            let report = finite_diff_check(
                &case.name,
                |tape, v| {
                    let out = f(tape, v)?;
                    Ok(if sabotage { out.with_grad_scale(1.5) } else { out })
                },
                &case.inputs,
                &cfg,
            )?;
            Ok((case.suite, report))
        })
        .collect()
}
