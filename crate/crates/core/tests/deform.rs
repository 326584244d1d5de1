mod common;

use std::collections::BTreeSet;

use common::{assert_close, seeded};
use deeppyramid::deform::{bilinear_sample, shared_tri_branch, OffsetHead, OFFSET_CHANNELS};
use deeppyramid::gradcheck::{finite_diff_check, project, GradCheckConfig};
use deeppyramid::nn::{Ctx, Init, ParamStore};
use deeppyramid::ops::ConvSpec;
use deeppyramid::rng::{self, Domain};
use deeppyramid::{Tape, Tensor};
use rand::Rng;

/// Bilinear read with zero padding, written from the textbook formula.
fn sample_oracle(x: &Tensor<f64>, b: usize, c: usize, py: f64, px: f64) -> f64 {
    let (h, w) = (x.shape()[2] as isize, x.shape()[3] as isize);
    let (y0, x0) = (py.floor(), px.floor());
    let (fy, fx) = (py - y0, px - x0);
    let pixel = |y: isize, xx: isize| {
        if y < 0 || xx < 0 || y >= h || xx >= w {
            0.0
        } else {
            x.at4(b, c, y as usize, xx as usize)
        }
    };
    let (y0, x0) = (y0 as isize, x0 as isize);
    (1.0 - fy) * (1.0 - fx) * pixel(y0, x0)
        + (1.0 - fy) * fx * pixel(y0, x0 + 1)
        + fy * (1.0 - fx) * pixel(y0 + 1, x0)
        + fy * fx * pixel(y0 + 1, x0 + 1)
}

/// Per-pixel, per-tap deformable convolution.
fn deform_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], d: usize, off: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let m = w.shape()[0];
    Tensor::from_fn(&[n, m, h, wd], |i| {
        let (px, py, oc, bi) = (i % wd, i / wd % h, i / (wd * h) % m, i / (wd * h * m));
        let mut acc = b[oc];
        for tap in 0..9 {
            let (ki, kj) = (tap / 3, tap % 3);
            let sy = py as f64 + d as f64 * (ki as f64 - 1.0) + off.at4(bi, 2 * tap, py, px);
            let sx = px as f64 + d as f64 * (kj as f64 - 1.0) + off.at4(bi, 2 * tap + 1, py, px);
            for ci in 0..c {
                acc += w.at4(oc, ci, ki, kj) * sample_oracle(x, bi, ci, sy, sx);
            }
        }
        acc
    })
}

/// Offsets whose magnitude lies in [0.2, 0.8], keeping samples off cell edges.
fn interior_offsets(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut r = rng::stream(seed, Domain::Test, 1);
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.2..0.8);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

#[test]
fn bilinear_examples() {
    let x: Tensor<f64> = Tensor::from_f64(&[1, 1, 2, 2], &[0., 1., 2., 3.]).unwrap();
    for (y, xx, v) in [(0.0, 0.0, 0.0), (0.0, 1.0, 1.0), (1.0, 0.0, 2.0), (1.0, 1.0, 3.0)] {
        assert_eq!(bilinear_sample(&x, 0, 0, y, xx), v);
    }
    assert_eq!(bilinear_sample(&x, 0, 0, 0.5, 0.5), 1.5);
    assert_eq!(bilinear_sample(&x, 0, 0, -5.0, -5.0), 0.0);
}

#[test]
fn bilinear_matches_formula_everywhere() {
    let x = seeded(1, &[2, 3, 5, 4]);
    let mut r = rng::stream(2, Domain::Test, 0);
    for _ in 0..500 {
        let (py, px) = (r.random_range(-2.0..7.0), r.random_range(-2.0..6.0));
        let (b, c) = (r.random_range(0..2), r.random_range(0..3));
        let got = bilinear_sample(&x, b, c, py, px);
        assert!((got - sample_oracle(&x, b, c, py, px)).abs() < 1e-12, "({py}, {px})");
    }
}

#[test]
fn deform_conv_matches_per_tap_oracle() {
    for (i, d) in [1usize, 3, 6].into_iter().enumerate() {
        let x = seeded(10 + i as u64, &[2, 3, 9, 8]);
        let w = seeded(20 + i as u64, &[4, 3, 3, 3]);
        let b = [0.1, -0.2, 0.3, 0.0];
        let off = interior_offsets(30 + i as u64, &[2, 18, 9, 8]);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .deform_conv2d(
                &tape.constant(w.clone()),
                Some(&tape.constant(Tensor::from_f64(&[4], &b).unwrap())),
                d,
                &tape.constant(off.clone()),
            )
            .unwrap()
            .value();
        assert_close(y.data(), deform_oracle(&x, &w, &b, d, &off).data(), 1e-10);
    }
}

#[test]
fn zero_offsets_reduce_to_dilated_conv() {
    for (i, d) in [1usize, 3, 6].into_iter().enumerate() {
        let x = seeded(40 + i as u64, &[1, 4, 11, 13]).cast::<f32>();
        let w = seeded(50 + i as u64, &[5, 4, 3, 3]).cast::<f32>();
        let b = seeded(60 + i as u64, &[5]).cast::<f32>();
        let tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let zero = tape.constant(Tensor::zeros(&[1, 18, 11, 13]));
        let deformed = xv.deform_conv2d(&wv, Some(&bv), d, &zero).unwrap().value();
        let plain = xv
            .conv2d(&wv, Some(&bv), &ConvSpec::new(3, 5).with_dilation(d))
            .unwrap()
            .value();
        assert!(deformed.max_abs_diff(&plain) < 1e-6);
    }
}

#[test]
fn ramp_probe_shifts_by_half_pixel() {
    let (h, w) = (6, 9);
    let x = Tensor::from_fn(&[1, 1, h, w], |i| (i % w) as f64);
    // Only the centre tap is active, with weight 2.
    let weight = Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 2.0 } else { 0.0 });
    let off = Tensor::from_fn(&[1, 18, h, w], |i| if (i / (h * w)) % 2 == 1 { 0.5 } else { 0.0 });
    let tape = Tape::new();
    for d in [1, 3, 6] {
        let y = tape
            .constant(x.clone())
            .deform_conv2d(&tape.constant(weight.clone()), None, d, &tape.constant(off.clone()))
            .unwrap()
            .value();
        for py in 0..h {
            for px in 0..w - 1 {
                assert!((y.at4(0, 0, py, px) - 2.0 * (px as f64 + 0.5)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn offset_channel_mismatch_is_an_error() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[1, 2, 5, 5]));
    let w = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
    assert!(x
        .deform_conv2d(&w, None, 3, &tape.constant(Tensor::zeros(&[1, 16, 5, 5])))
        .is_err());
    assert!(x
        .deform_conv2d(&w, None, 3, &tape.constant(Tensor::zeros(&[1, 18, 4, 5])))
        .is_err());
}

/// Input positions (relative to `centre`) with a nonzero gradient for one
/// output pixel.
fn support(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    d: usize,
    off: &Tensor<f64>,
    centre: (usize, usize),
) -> BTreeSet<(isize, isize)> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = xv
        .deform_conv2d(&tape.constant(w.clone()), None, d, &tape.constant(off.clone()))
        .unwrap();
    let shape = y.shape();
    let mut seed = Tensor::zeros(&shape);
    let (h, wd) = (shape[2], shape[3]);
    seed.data_mut()[centre.0 * wd + centre.1] = 1.0;
    tape.backward_with_seed(y, seed).unwrap();
    let g = xv.grad().unwrap();
    let mut out = BTreeSet::new();
    for yy in 0..h {
        for xx in 0..wd {
            if g.at4(0, 0, yy, xx) != 0.0 {
                out.insert((yy as isize - centre.0 as isize, xx as isize - centre.1 as isize));
            }
        }
    }
    out
}

fn chebyshev((dy, dx): (isize, isize)) -> isize {
    dy.abs().max(dx.abs())
}

#[test]
fn unit_offsets_cover_the_expected_rings() {
    let n = 21;
    let x = Tensor::full(&[1, 1, n, n], 1.0);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0);
    let mut union = BTreeSet::new();
    for d in [1usize, 3, 6] {
        let mut reach = BTreeSet::new();
        let units: &[f64] = if d == 1 { &[0.0] } else { &[-1.0, 0.0, 1.0] };
        for &oy in units {
            for &ox in units {
                let off = Tensor::from_fn(&[1, 18, n, n], |i| if (i / (n * n)) % 2 == 0 { oy } else { ox });
                reach.extend(support(&x, &w, d, &off, (10, 10)));
            }
        }
        let radii: BTreeSet<isize> = reach.iter().map(|&p| chebyshev(p)).collect();
        let expect: BTreeSet<isize> = match d {
            1 => (0..=1).collect(),
            3 => (0..=1).chain(2..=4).collect(),
            _ => (0..=1).chain(5..=7).collect(),
        };
        assert_eq!(radii, expect, "dilation {d}");
        union.extend(reach);
    }
    // The union is sparse: every radius 0..=7 is hit and the bounding box is
    // exactly 15×15.
    let radii: BTreeSet<isize> = union.iter().map(|&p| chebyshev(p)).collect();
    assert_eq!(radii, (0..=7).collect());
    let rows: BTreeSet<isize> = union.iter().map(|p| p.0).collect();
    let cols: BTreeSet<isize> = union.iter().map(|p| p.1).collect();
    assert_eq!((rows.first(), rows.last()), (Some(&-7), Some(&7)));
    assert_eq!((cols.first(), cols.last()), (Some(&-7), Some(&7)));
}

#[test]
fn gradient_support_stays_within_radius_eight() {
    let n = 23;
    let x = seeded(70, &[1, 1, n, n]);
    let w = seeded(71, &[1, 1, 3, 3]);
    for (i, d) in [3usize, 6].into_iter().enumerate() {
        let mut r = rng::stream(72 + i as u64, Domain::Test, 0);
        let off = Tensor::from_fn(&[1, 18, n, n], |_| r.random_range(-1.0..=1.0));
        let reach = support(&x, &w, d, &off, (11, 11));
        assert!(!reach.is_empty());
        assert!(reach.iter().all(|&p| chebyshev(p) <= 8), "dilation {d}");
    }
}

fn head(dilation: usize, init: Init) -> (ParamStore<f64>, OffsetHead) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(3, Domain::Init, 0);
    let head = OffsetHead::new(&mut store, &mut r, "head", 2, dilation, init).unwrap();
    (store, head)
}

#[test]
fn offset_heads_clip_and_keep_geometry() {
    for d in [3, 6] {
        let (store, h) = head(d, Init::He);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, false);
        let x = seeded(80, &[1, 2, 10, 12]).map(|v| v * 1e6);
        let off = h.forward(&ctx, tape.constant(x)).unwrap().value();
        assert_eq!(off.shape(), &[1, OFFSET_CHANNELS, 10, 12]);
        assert!(off.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(off.data().contains(&1.0) && off.data().iter().any(|&v| v == -1.0));

        let (store, h) = head(d, Init::Zeros);
        let ctx = Ctx::new(&tape, &store, false, false);
        let off = h
            .forward(&ctx, tape.constant(seeded(81, &[1, 2, 6, 6])))
            .unwrap()
            .value();
        assert!(off.data().iter().all(|&v| v == 0.0));
    }
    let mut store = ParamStore::<f64>::new();
    let mut r = rng::stream(0, Domain::Init, 0);
    assert!(OffsetHead::new(&mut store, &mut r, "bad", 2, 2, Init::He).is_err());
}

#[test]
fn tri_branch_zero_offsets_equal_plain_convs() {
    let tape = Tape::new();
    let x = tape.constant(seeded(90, &[1, 3, 14, 14]));
    let w = tape.constant(seeded(91, &[2, 3, 3, 3]));
    let b = tape.constant(seeded(92, &[2]));
    let zero = tape.constant(Tensor::zeros(&[1, 18, 14, 14]));
    let out = shared_tri_branch(&x, &w, Some(&b), &zero, &zero).unwrap();
    for (y, d) in out.as_array().iter().zip([1, 3, 6]) {
        let plain = x.conv2d(&w, Some(&b), &ConvSpec::new(3, 2).with_dilation(d)).unwrap();
        assert!(y.value().max_abs_diff(&plain.value()) < 1e-12);
    }
}

#[test]
fn shared_weight_gradient_is_sum_of_branches() {
    let x = seeded(100, &[1, 2, 9, 9]);
    let w = seeded(101, &[2, 2, 3, 3]);
    let o3 = interior_offsets(102, &[1, 18, 9, 9]);
    let o6 = interior_offsets(103, &[1, 18, 9, 9]);

    let tape = Tape::new();
    let wv = tape.leaf(w.clone(), true);
    let (xv, o3v, o6v) = (
        tape.constant(x.clone()),
        tape.constant(o3.clone()),
        tape.constant(o6.clone()),
    );
    let out = shared_tri_branch(&xv, &wv, None, &o3v, &o6v).unwrap();
    let losses: Vec<_> = out
        .as_array()
        .iter()
        .enumerate()
        .map(|(i, y)| project(y, i as u64).unwrap())
        .collect();
    let total = losses[0].add(&losses[1]).unwrap().add(&losses[2]).unwrap();
    tape.backward(total).unwrap();
    let shared = wv.grad().unwrap();

    let mut summed = Tensor::zeros(w.shape());
    for branch in 0..3 {
        let tape = Tape::new();
        let wv = tape.leaf(w.clone(), true);
        let xv = tape.constant(x.clone());
        let y = match branch {
            0 => xv.conv2d(&wv, None, &ConvSpec::new(3, 2)).unwrap(),
            1 => xv.deform_conv2d(&wv, None, 3, &tape.constant(o3.clone())).unwrap(),
            _ => xv.deform_conv2d(&wv, None, 6, &tape.constant(o6.clone())).unwrap(),
        };
        tape.backward(project(&y, branch as u64).unwrap()).unwrap();
        summed.add_assign(&wv.grad().unwrap());
    }
    assert!(shared.max_abs_diff(&summed) < 1e-10);

    let report = finite_diff_check(
        "tri_branch_weight",
        |tape, v| {
            let out = shared_tri_branch(
                &tape.constant(x.clone()),
                &v[0],
                None,
                &tape.constant(o3.clone()),
                &tape.constant(o6.clone()),
            )?;
            let parts: Vec<_> = out
                .as_array()
                .iter()
                .enumerate()
                .map(|(i, y)| project(y, i as u64))
                .collect::<Result<_, _>>()?;
            parts[0].add(&parts[1])?.add(&parts[2])
        },
        &[w],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn deform_gradients_pass_finite_differences() {
    for (i, d) in [1usize, 3, 6].into_iter().enumerate() {
        let x = seeded(110 + i as u64, &[1, 2, 8, 7]);
        let w = seeded(120 + i as u64, &[2, 2, 3, 3]);
        let off = interior_offsets(130 + i as u64, &[1, 18, 8, 7]);
        let report = finite_diff_check(
            "deform_conv2d",
            |_, v| project(&v[0].deform_conv2d(&v[1], None, d, &v[2])?, 7),
            &[x, w, off],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
