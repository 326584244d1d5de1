mod common;

use common::{assert_close, naive_conv, neighbourhood_mean, seeded};
use deeppyramid::blocks::{ffd_combine, pyramid_branch, Dpr, DprConfig, Pvf, PvfConfig};
use deeppyramid::gradcheck::{run_suite, Suite, SuiteOptions};
use deeppyramid::nn::{Ctx, Init, ParamId, ParamStore};
use deeppyramid::ops::concat_channels;
use deeppyramid::rng::{self, Domain};
use deeppyramid::{Tape, Tensor};
use proptest::prelude::*;

fn pvf(channels: usize, seed: u64) -> (ParamStore<f64>, Pvf) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, Domain::Init, 0);
    let block = Pvf::new(&mut store, &mut r, "pvf", PvfConfig::new(channels)).unwrap();
    (store, block)
}

fn dpr(cfg: DprConfig, seed: u64) -> (ParamStore<f64>, Dpr) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, Domain::Init, 0);
    let block = Dpr::new(&mut store, &mut r, "dpr", cfg).unwrap();
    (store, block)
}

fn randomize(store: &mut ParamStore<f64>, id: ParamId, seed: u64, scale: f64) {
    let shape = store.get(id).shape().to_vec();
    *store.get_mut(id) = seeded(seed, &shape).map(|v| v * scale);
}

/// Keeps only the centre tap of a 3×3 weight, so the conv acts pointwise.
fn centre_only(store: &mut ParamStore<f64>, id: ParamId) {
    for (i, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
        if i % 9 != 4 {
            *v = 0.0;
        }
    }
}

fn max_spread(t: &Tensor<f64>) -> f64 {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    hi - lo
}

#[test]
fn pvf_preserves_shape() {
    let (store, block) = pvf(16, 0);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let y = block.forward(&ctx, tape.constant(seeded(1, &[2, 16, 32, 32]))).unwrap();
    assert_eq!(y.shape(), vec![2, 16, 32, 32]);
}

#[test]
fn pvf_rejects_bad_widths() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng::stream(0, Domain::Init, 0);
    assert!(Pvf::new(&mut store, &mut r, "a", PvfConfig::new(12)).is_err());
    assert!(Pvf::new(&mut store, &mut r, "b", PvfConfig::new(4)).is_err());
    let mut cfg = PvfConfig::new(8);
    cfg.pool_kernels = [3, 9, 5];
    assert!(Pvf::new(&mut store, &mut r, "c", cfg).is_err());
}

#[test]
fn pvf_constant_input() {
    let (mut store, block) = pvf(8, 2);
    for id in [block.bottleneck.bias, block.grouped.bias, block.fuse.bias]
        .into_iter()
        .flatten()
    {
        randomize(&mut store, id, 3, 0.5);
    }
    randomize(&mut store, block.norm.bias, 4, 1.0);
    let x = Tensor::full(&[1, 8, 12, 12], 1.7);

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let branches = block.branches(&ctx, tape.constant(x.clone())).unwrap();
    let first = branches[0].value();
    assert!(first
        .data()
        .chunks(144)
        .all(|p| max_spread(&Tensor::from_vec(&[144], p.to_vec()).unwrap()) < 1e-12));
    for b in &branches[1..] {
        assert!(b.value().max_abs_diff(&first) < 1e-12);
    }
    // Zero-padded 3×3 convolutions perturb a two-pixel border; the
    // interior of the fused map is constant per channel.
    let fused = block.fused(&ctx, tape.constant(x.clone())).unwrap().value();
    for c in 0..8 {
        let centre = fused.at4(0, c, 6, 6);
        for y in 2..10 {
            for xx in 2..10 {
                assert!((fused.at4(0, c, y, xx) - centre).abs() < 1e-12);
            }
        }
    }

    // With pointwise fusion weights the fused map is spatially constant per
    // channel. Layer norm runs over (C, H, W) jointly, so each channel maps
    // to its standardized level plus bias, and vanishes to the bias only
    // when the levels coincide.
    centre_only(&mut store, block.grouped.weight);
    centre_only(&mut store, block.fuse.weight);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let fused = block.fused(&ctx, tape.constant(x.clone())).unwrap().value();
    let levels: Vec<f64> = (0..8).map(|c| fused.data()[c * 144]).collect();
    assert!(fused
        .data()
        .iter()
        .enumerate()
        .all(|(i, v)| (v - levels[i / 144]).abs() < 1e-12));
    let mean = levels.iter().sum::<f64>() / 8.0;
    let var = levels.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / 8.0;
    let y = block.forward(&ctx, tape.constant(x)).unwrap().value();
    let bias = store.get(block.norm.bias);
    for (i, v) in y.data().iter().enumerate() {
        let c = i / 144;
        assert!((v - ((levels[c] - mean) / (var + 1e-5).sqrt() + bias.data()[c])).abs() < 1e-9);
    }

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let flat = Tensor::full(&[1, 8, 12, 12], 0.25);
    let normed = tape
        .constant(flat)
        .layer_norm(3, Some(&ctx.param(block.norm.gain)), Some(&ctx.param(block.norm.bias)))
        .unwrap()
        .value();
    assert!(normed
        .data()
        .iter()
        .enumerate()
        .all(|(i, v)| (v - bias.data()[i / 144]).abs() < 1e-12));
}

#[test]
fn pvf_branches_match_neighbourhood_oracle() {
    let (store, block) = pvf(8, 5);
    let x = seeded(6, &[1, 8, 8, 8]);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let branches = block.branches(&ctx, tape.constant(x.clone())).unwrap();

    let bias = store.get(block.bottleneck.bias.unwrap()).data().to_vec();
    let z = naive_conv(&x, store.get(block.bottleneck.weight), Some(&bias), 1, 1, 0);
    for c in 0..2 {
        let plane = &z.data()[c * 64..(c + 1) * 64];
        let mean = plane.iter().sum::<f64>() / 64.0;
        assert!(branches[0].value().data()[c * 64..(c + 1) * 64]
            .iter()
            .all(|v| (v - mean).abs() < 1e-12));
    }
    for (b, k) in branches[1..].iter().zip([3, 5, 9]) {
        assert_close(b.value().data(), neighbourhood_mean(&z, k).data(), 1e-12);
    }
}

#[test]
fn pvf_grouped_fusion_isolates_branches() {
    let (store, block) = pvf(8, 7);
    let cat = seeded(8, &[1, 8, 8, 8]);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let full = block.grouped.forward(&ctx, tape.constant(cat.clone())).unwrap().value();
    // Four groups: two concat channels in, one output channel each.
    for g in 0..4 {
        let masked = Tensor::from_fn(&[1, 8, 8, 8], |i| if i / 64 / 2 == g { cat.data()[i] } else { 0.0 });
        let y = block.grouped.forward(&ctx, tape.constant(masked)).unwrap().value();
        assert_eq!(&y.data()[g * 64..(g + 1) * 64], &full.data()[g * 64..(g + 1) * 64]);
    }
}

#[test]
fn pyramid_branch_examples() {
    let tape = Tape::new();
    let x = seeded(9, &[1, 2, 5, 6]);
    assert_eq!(
        pyramid_branch(&tape.constant(x.clone()), 1).unwrap().value().data(),
        x.data()
    );
    let c = pyramid_branch(&tape.constant(Tensor::full(&[1, 1, 4, 4], 2.0)), 5)
        .unwrap()
        .value();
    assert!(c.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    let grid = Tensor::from_fn(&[1, 1, 3, 3], |i| (i + 1) as f64);
    let y = pyramid_branch(&tape.constant(grid), 3).unwrap().value();
    assert_eq!(y.data()[4], 5.0);
    assert!(pyramid_branch(&tape.constant(x), 4).is_err());
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64
}

proptest! {
    #[test]
    fn pooling_branches_contract_variance(
        h in 1usize..12,
        w in 1usize..12,
        seed in 0u64..1000,
        k in prop::sample::select(vec![3usize, 5, 9]),
    ) {
        let x = seeded(seed, &[1, 1, h, w]);
        let tape = Tape::new();
        let y = pyramid_branch(&tape.constant(x.clone()), k).unwrap().value();
        prop_assert!(variance(y.data()) <= variance(x.data()) + 1e-12);
    }
}

#[test]
fn block_gradients_pass_finite_differences() {
    for suite in [Suite::Pvf, Suite::Dpr] {
        let reports = run_suite(suite, &SuiteOptions::default()).unwrap();
        assert!(!reports.is_empty());
        for (_, r) in reports {
            assert!(r.passed(), "{r}");
        }
    }
}

#[test]
fn dpr_shape_contract() {
    let (store, block) = dpr(DprConfig::new(32, 16, 16), 10);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let y = block
        .forward(
            &ctx,
            tape.constant(seeded(11, &[1, 32, 8, 8])),
            tape.constant(seeded(12, &[1, 16, 16, 16])),
        )
        .unwrap();
    assert_eq!(y.shape(), vec![1, 16, 16, 16]);
    let bad = tape.constant(seeded(13, &[1, 16, 15, 16]));
    assert!(block
        .forward(&ctx, tape.constant(seeded(11, &[1, 32, 8, 8])), bad)
        .is_err());
}

#[test]
fn dpr_constant_inputs_agree_in_the_interior() {
    let mut cfg = DprConfig::new(4, 4, 4);
    cfg.offset_init = Init::ScaledHe(0.05);
    let (mut store, block) = dpr(cfg, 14);
    for id in [block.head3.conv.bias, block.head6.conv.bias].into_iter().flatten() {
        randomize(&mut store, id, 15, 0.6);
    }
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let dec = tape.constant(Tensor::full(&[1, 4, 12, 12], 0.8));
    let skip = tape.constant(Tensor::full(&[1, 4, 24, 24], -0.3));
    let cat = concat_channels(&[dec.bilinear_resize(24, 24).unwrap(), skip]).unwrap();
    let r = block.reception(&ctx, cat).unwrap();
    let off = r.offsets3.value();
    assert!(
        off.data().iter().any(|&v| v.abs() > 0.1),
        "offsets should be non-trivial"
    );
    let [b1, b3, b6] = r.branches.as_array().map(|b| b.value());
    let fused = r.fused.value();
    // Offset heads reach 7 pixels and the d=6 branch samples up to 7
    // pixels away plus one interpolation neighbour.
    for c in 0..4 {
        for y in 8..16 {
            for x in 8..16 {
                let v = b1.at4(0, c, y, x);
                assert!((b3.at4(0, c, y, x) - v).abs() < 1e-12);
                assert!((b6.at4(0, c, y, x) - v).abs() < 1e-12);
                assert!((fused.at4(0, c, y, x) - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn ffd_examples() {
    let tape = Tape::new();
    let bs: Vec<_> = (0..3).map(|i| tape.constant(seeded(20 + i, &[1, 2, 1, 2]))).collect();

    let equal = tape.constant(Tensor::full(&[1, 3, 1, 2], 0.4));
    let out = ffd_combine(&bs, &equal).unwrap().fused.value();
    let mean: Vec<f64> = (0..4)
        .map(|i| bs.iter().map(|b| b.value().data()[i]).sum::<f64>() / 3.0)
        .collect();
    assert_close(out.data(), &mean, 1e-12);

    let saturated = tape.constant(Tensor::from_f64(&[1, 3, 1, 2], &[1000., 1000., 0., 0., 0., 0.]).unwrap());
    let out = ffd_combine(&bs, &saturated).unwrap();
    assert!(out.weights.value().data()[..2].iter().all(|&w| w > 1.0 - 1e-6));
    assert_close(out.fused.value().data(), bs[0].value().data(), 1e-9);

    // Two pixels with distinct logits against a scalar softmax.
    let logits = seeded(23, &[1, 3, 1, 2]);
    let out = ffd_combine(&bs, &tape.constant(logits.clone())).unwrap().fused.value();
    for p in 0..2 {
        let l: Vec<f64> = (0..3).map(|i| logits.data()[i * 2 + p]).collect();
        let z: f64 = l.iter().map(|v| v.exp()).sum();
        for c in 0..2 {
            let expect: f64 = (0..3).map(|i| l[i].exp() / z * bs[i].value().data()[c * 2 + p]).sum();
            assert!((out.data()[c * 2 + p] - expect).abs() < 1e-6);
        }
    }
    assert!(ffd_combine(&bs[..2], &equal).is_err());
}

proptest! {
    #[test]
    fn ffd_is_a_convex_combination(seed in 0u64..10_000, spread in 0.1f64..50.0) {
        let tape = Tape::new();
        let bs: Vec<_> = (0..3).map(|i| tape.constant(seeded(seed * 3 + i, &[2, 3, 4, 5]))).collect();
        let logits = seeded(seed + 99_999, &[2, 3, 4, 5]).map(|v| v * spread);
        let out = ffd_combine(&bs, &tape.constant(logits)).unwrap();
        let w = out.weights.value();
        let hw = 20;
        for b in 0..2 {
            for p in 0..hw {
                let ws: Vec<f64> = (0..3).map(|i| w.data()[(b * 3 + i) * hw + p]).collect();
                prop_assert!(ws.iter().all(|&v| v >= 0.0));
                prop_assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let fused = out.fused.value();
        for (i, v) in fused.data().iter().enumerate() {
            let vals: Vec<f64> = bs.iter().map(|b| b.value().data()[i]).collect();
            let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
            let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }
}

#[test]
fn frozen_offsets_and_uniform_ffd_average_dilated_convs() {
    let (mut store, block) = dpr(DprConfig::new(3, 3, 4), 30);
    for d in &block.ffd.descriptors {
        *store.get_mut(d.weight) = Tensor::zeros(store.get(d.weight).shape());
    }
    randomize(&mut store, block.value.bias.unwrap(), 31, 1.0);
    let x = seeded(32, &[1, 6, 8, 8]);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let r = block.reception(&ctx, tape.constant(x.clone())).unwrap();
    assert!(r.offsets3.value().data().iter().all(|&v| v == 0.0));
    assert!(r.weights.value().data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

    let w = store.get(block.value.weight);
    let b = store.get(block.value.bias.unwrap()).data().to_vec();
    let convs: Vec<_> = [1, 3, 6]
        .iter()
        .map(|&d| naive_conv(&x, w, Some(&b), d, 1, d))
        .collect();
    let mean: Vec<f64> = (0..convs[0].len())
        .map(|i| convs.iter().map(|c| c.data()[i]).sum::<f64>() / 3.0)
        .collect();
    assert_close(r.fused.value().data(), &mean, 1e-10);
}

#[test]
fn offset_heads_receive_gradient() {
    for init in [Init::Zeros, Init::He] {
        let mut cfg = DprConfig::new(4, 4, 4);
        cfg.offset_init = init;
        let (store, block) = dpr(cfg, 40);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, true, true);
        let y = block
            .forward(
                &ctx,
                tape.constant(seeded(41, &[1, 4, 8, 8])),
                tape.constant(seeded(42, &[1, 4, 16, 16])),
            )
            .unwrap();
        tape.backward(deeppyramid::gradcheck::project(&y, 3).unwrap()).unwrap();
        let grads = ctx.grads();
        for head in [&block.head3, &block.head6] {
            let (_, g) = grads.iter().find(|(id, _)| *id == head.conv.weight).unwrap();
            assert!(g.data().iter().any(|&v| v != 0.0), "{init:?}");
        }
    }
}

#[test]
fn dpr_parameter_count_is_closed_form() {
    let (store, block) = dpr(DprConfig::new(8, 4, 6), 50);
    let cin = 12;
    let heads = (81 + 225) * cin * 18 + 2 * 18;
    let value = 9 * cin * 6 + 6;
    let ffd = 3 * (6 + 1);
    let post = 9 * 6 * 6 + 6;
    let norm = 2 * 6;
    assert_eq!(block.param_count(), heads + value + ffd + post + norm);
    assert_eq!(store.param_count(), block.param_count());
}
