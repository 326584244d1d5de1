mod common;

use common::seeded;
use deeppyramid::data::{generate_synthetic, SegmentationSample, SynthConfig};
use deeppyramid::gradcheck::{run_suite, Suite, SuiteOptions};
use deeppyramid::network::{checkpoint_bytes, Network, NetworkConfig, Variant};
use deeppyramid::rng::{self, Domain};
use deeppyramid::train::{
    augment, ce_log_dice_loss, loss_terms, poly_lr, train, warp, AugmentationSpec, Geometry, Optimizer, TrainConfig,
};
use deeppyramid::{Error, LabelMap, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn random_labels(seed: u64, shape: &[usize], classes: u8) -> LabelMap {
    let mut r = rng::stream(seed, Domain::Test, 3);
    let n = shape.iter().product();
    LabelMap::new(shape, (0..n).map(|_| r.random_range(0..classes)).collect()).unwrap()
}

/// Softmax probabilities written out per pixel.
fn probabilities(z: &Tensor<f64>) -> Tensor<f64> {
    let [b, k, h, w] = z.shape().try_into().unwrap();
    let hw = h * w;
    Tensor::from_fn(z.shape(), |i| {
        let (q, c, bi) = (i % hw, i / hw % k, i / (hw * k));
        let denom: f64 = (0..k).map(|j| z.data()[(bi * k + j) * hw + q].exp()).sum();
        z.data()[(bi * k + c) * hw + q].exp() / denom
    })
    .reshape(&[b, k, h, w])
    .unwrap()
}

fn ce_oracle(z: &Tensor<f64>, y: &LabelMap) -> f64 {
    let p = probabilities(z);
    let [b, k, h, w] = z.shape().try_into().unwrap();
    let mut total = 0.0;
    for bi in 0..b {
        for q in 0..h * w {
            let c = y.data()[bi * h * w + q] as usize;
            total -= p.data()[(bi * k + c) * h * w + q].ln();
        }
    }
    total / (b * h * w) as f64
}

fn neg_log_dice_oracle(z: &Tensor<f64>, y: &LabelMap) -> f64 {
    let p = probabilities(z);
    let [b, k, h, w] = z.shape().try_into().unwrap();
    let hw = h * w;
    let mut dice = 0.0;
    for c in 1..k {
        let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
        for bi in 0..b {
            for q in 0..hw {
                let pv = p.data()[(bi * k + c) * hw + q];
                let yv = (y.data()[bi * hw + q] as usize == c) as u8 as f64;
                inter += pv * yv;
                ps += pv;
                ys += yv;
            }
        }
        dice += (2.0 * inter + 1e-6) / (ps + ys + 1e-6);
    }
    -(dice / (k - 1) as f64).ln()
}

#[test]
fn uniform_binary_cross_entropy_is_ln2() {
    let z = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
    let y = LabelMap::new(&[4, 4], (0..16).map(|i| (i % 2) as u8).collect()).unwrap();
    let t = loss_terms(&z, &y, 1.0).unwrap();
    assert!((t.total - 2f64.ln()).abs() < 1e-6);
}

#[test]
fn saturated_logits_give_zero_loss() {
    let y = random_labels(1, &[2, 5, 5], 3);
    let z = Tensor::from_fn(&[2, 3, 5, 5], |i| {
        let (q, c, b) = (i % 25, i / 25 % 3, i / 75);
        if y.data()[b * 25 + q] as usize == c {
            40.0
        } else {
            -40.0
        }
    });
    let t = loss_terms(&z, &y, 0.5).unwrap();
    assert!(t.total.abs() < 1e-9, "{t:?}");
    assert!(t.dice.iter().all(|d| (d - 1.0).abs() < 1e-9));
}

#[test]
fn loss_components_match_oracles() {
    for seed in 0..4 {
        let z = seeded(seed, &[2, 4, 3, 5]).map(|v| 2.0 * v);
        let y = random_labels(seed + 10, &[2, 3, 5], 4);
        let ce = loss_terms(&z, &y, 1.0).unwrap().total;
        let nld = loss_terms(&z, &y, 0.0).unwrap().total;
        assert!((ce - ce_oracle(&z, &y)).abs() < 1e-12);
        assert!((nld - neg_log_dice_oracle(&z, &y)).abs() < 1e-12);
        let mixed = loss_terms(&z, &y, 0.3).unwrap().total;
        assert!((mixed - (0.3 * ce + 0.7 * nld)).abs() < 1e-12);

        let tape = Tape::new();
        let v = ce_log_dice_loss(&tape.constant(z.clone()), &y, 0.3).unwrap();
        assert!((v.value().data()[0] - mixed).abs() < 1e-12);
    }
}

#[test]
fn invalid_label_names_pixel_and_value() {
    let z = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
    let y = LabelMap::new(&[2, 2], vec![0, 1, 2, 3]).unwrap();
    match loss_terms(&z, &y, 0.5) {
        Err(Error::InvalidLabel {
            pixel,
            value,
            num_classes,
        }) => assert_eq!((pixel, value, num_classes), (3, 3, 3)),
        other => panic!("expected an invalid-label error, got {other:?}"),
    }
}

#[test]
fn loss_gradient_passes_finite_differences() {
    for (_, r) in run_suite(Suite::Loss, &SuiteOptions::default()).unwrap() {
        assert!(r.passed(), "{r}");
    }
}

#[test]
fn poly_schedule_values() {
    assert_eq!(poly_lr(0.001, 0, 200), 0.001);
    assert_eq!(poly_lr(0.001, 200, 200), 0.0);
    assert!((poly_lr(0.001, 100, 200) - 5.3589e-4).abs() < 1e-8);
    assert_eq!(poly_lr(0.001, 300, 200), 0.0);
}

proptest! {
    #[test]
    fn poly_schedule_is_nonincreasing(total in 1usize..500, lr in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        for it in 0..=total {
            let v = poly_lr(lr, it, total);
            prop_assert!(v <= prev && v >= 0.0);
            prev = v;
        }
    }

    #[test]
    fn loss_is_nonnegative(seed in 0u64..5000, scale in 0.1f64..20.0, alpha in 0.0f64..=1.0) {
        let z = seeded(seed, &[1, 3, 4, 4]).map(|v| v * scale);
        let y = random_labels(seed, &[4, 4], 3);
        prop_assert!(loss_terms(&z, &y, alpha).unwrap().total >= 0.0);
    }
}

fn small_set(n: usize) -> Vec<SegmentationSample> {
    generate_synthetic(&SynthConfig::new(5, n, 64, 3)).unwrap()
}

#[test]
fn identity_augmentation_is_identity() {
    let s = &small_set(1)[0];
    let out = augment(
        s,
        &AugmentationSpec::identity(),
        &mut rng::stream(0, Domain::Augment, 0),
    )
    .unwrap();
    assert_eq!(out.image, s.image);
    assert_eq!(out.mask, s.mask);
    assert_eq!(warp(s, &Geometry::IDENTITY).unwrap().mask, s.mask);
}

#[test]
fn quarter_turn_permutes_pixels() {
    let image = Tensor::from_fn(&[3, 2, 2], |i| 0.1 * i as f32);
    let mask = LabelMap::new(&[2, 2], vec![0, 1, 2, 3]).unwrap();
    let s = SegmentationSample::new("q", image.clone(), mask.clone(), 0).unwrap();
    let g = Geometry {
        angle_deg: 90.0,
        ..Geometry::IDENTITY
    };
    let out = warp(&s, &g).unwrap();
    // Quarter turn about the centre: out(y, x) = in(1 - x, y).
    for y in 0..2 {
        for x in 0..2 {
            assert_eq!(out.mask.get(y, x), mask.get(1 - x, y));
            for c in 0..3 {
                let (a, b) = (
                    out.image.data()[c * 4 + y * 2 + x],
                    image.data()[c * 4 + (1 - x) * 2 + y],
                );
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn augmentation_keeps_shape_and_labels(draw in 0u64..100_000, strength in 0.0f64..=1.0) {
        let samples = small_set(2);
        let s = &samples[(draw % 2) as usize];
        let out = augment(s, &AugmentationSpec::scaled(strength), &mut rng::stream(draw, Domain::Augment, 0)).unwrap();
        prop_assert_eq!(out.image.shape(), s.image.shape());
        prop_assert_eq!(out.mask.shape(), s.mask.shape());
        prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let before: std::collections::BTreeSet<u8> = s.mask.data().iter().copied().collect();
        prop_assert!(out.mask.data().iter().all(|v| before.contains(v)));
    }
}

#[test]
fn augmentation_rejects_rotation_beyond_limit() {
    let spec = AugmentationSpec {
        max_rotation_deg: 31.0,
        ..AugmentationSpec::default()
    };
    assert!(spec.validate().is_err());
}

fn quick(iters: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        total_iters: iters,
        lr_init: lr,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let data = small_set(6);
    let mut net = Network::<f32>::new(NetworkConfig::desk(Variant::UnetPlus, 3), 0).unwrap();
    let before = net.store.clone();
    train(&mut net, &data, &quick(3, 0.0), None).unwrap();
    for id in before.ids().filter(|&id| before.is_trainable(id)) {
        assert_eq!(before.get(id), net.store.get(id), "{}", before.name(id));
    }
}

#[test]
fn training_is_deterministic() {
    let data = small_set(6);
    let run = || {
        let mut net = Network::<f32>::new(NetworkConfig::desk(Variant::DeepPyramidPlus, 3), 3).unwrap();
        let report = train(&mut net, &data, &quick(3, 1e-3), None).unwrap();
        (checkpoint_bytes(&net).unwrap(), report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn long_run_reduces_smoothed_loss() {
    let data = small_set(40);
    let mut net = Network::<f32>::new(NetworkConfig::desk(Variant::UnetPlus, 3), 1).unwrap();
    let cfg = TrainConfig {
        total_iters: 200,
        ..TrainConfig::default()
    };
    let report = train(&mut net, &data, &cfg, None).unwrap();
    let (head, tail) = report.head_tail_means(20).unwrap();
    assert!(tail < head, "{head} -> {tail}");
    assert!(report.loss_curve().lines().count() == 200);
}

#[test]
fn divergence_reports_iteration_and_batch() {
    let data = small_set(4);
    let mut net = Network::<f32>::new(NetworkConfig::desk(Variant::UnetPlus, 3), 0).unwrap();
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        augmentation: None,
        ..quick(30, 1e12)
    };
    match train(&mut net, &data, &cfg, None) {
        Err(Error::NonFiniteLoss { iter, batch_ids, .. }) => {
            assert!(iter > 0);
            assert_eq!(batch_ids.len(), 2);
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.losses.last().copied())),
    }
}
