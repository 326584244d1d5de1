//! Central finite-difference verification of tape gradients (in `f64`).

mod suite;

pub use suite::{run_suite, Suite, SuiteOptions};

use std::fmt;

use rand::seq::index;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Perturbation `h`; the derivative estimate is `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    pub tolerance: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Coordinates checked per input; larger inputs are subsampled.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    /// Relative error of the derivative along one random unit direction
    /// that moves every coordinate of every input at once.
    pub directional_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.directional_rel_error < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<28} max_rel={:.3e} dir_rel={:.3e} coords={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.directional_rel_error,
            self.coords_checked
        )
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&tape, &vars)?;
    let v = out.value();
    if v.len() != 1 {
        return Err(Error::Autograd(format!(
            "gradcheck needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares the tape gradient of the scalar function `f` at `inputs` with
/// central finite differences.
pub fn finite_diff_check<F>(name: &str, f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&tape, &vars)?;
        tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let mut rng = rng::stream(cfg.seed, Domain::GradCheck, 0);
    let h = cfg.step;
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => {
                let mut c = index::sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let x0 = input.data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let fp = evaluate(&f, &probe)?;
            probe[k].data_mut()[i] = x0 - h;
            let fm = evaluate(&f, &probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let e = rel_err(analytic[k].data()[i], numeric, cfg.floor);
            if e > max_rel || worst.is_none() {
                max_rel = max_rel.max(e);
                worst = Some((k, i));
            }
            checked += 1;
        }
    }

    // Unit-norm direction, so no single coordinate moves further than `h`.
    let mut dirs: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::from_fn(t.shape(), |_| rng::normal(&mut rng)))
        .collect();
    let norm = dirs.iter().flat_map(|d| d.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for d in &mut dirs {
            *d = d.map(|v| v / norm);
        }
    }
    let shifted = |sign: f64| -> Vec<Tensor<f64>> {
        inputs
            .iter()
            .zip(&dirs)
            .map(|(t, d)| {
                let data = t.data().iter().zip(d.data()).map(|(&x, &v)| x + sign * h * v).collect();
                Tensor::from_vec(t.shape(), data).unwrap()
            })
            .collect()
    };
    let numeric_dir = (evaluate(&f, &shifted(1.0))? - evaluate(&f, &shifted(-1.0))?) / (2.0 * h);
    let analytic_dir: f64 = analytic
        .iter()
        .zip(&dirs)
        .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum();

    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        worst,
        coords_checked: checked,
        directional_rel_error: rel_err(analytic_dir, numeric_dir, cfg.floor),
        tolerance: cfg.tolerance,
    })
}

/// Scalar projection `sum(y * r)` with a fixed random `r`, used to turn a
/// tensor-valued op into a scalar function for checking.
pub fn project<'t>(y: &Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = rng::stream(seed, Domain::GradCheck, 1);
    let r = Tensor::from_fn(&y.shape(), |_| rng::normal(&mut rng));
    Ok(y.mul_const(&r)?.sum())
}
