//! Cross-entropy log-Dice loss:
//! `α·CE + (1−α)·(−ln mean_c Dice_c)` with soft Dice
//! `(2·Σ p·y + ε) / (Σ p + Σ y + ε)` over the foreground classes `c ≥ 1`.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, LabelMap, Tensor};

pub const DICE_EPS: f64 = 1e-6;

/// Loss value broken into its terms (all in f64).
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub cross_entropy: f64,
    /// Soft Dice per foreground class, index 0 is class 1.
    pub dice: Vec<f64>,
    pub log_dice: f64,
    pub total: f64,
}

struct Evaluated {
    terms: LossTerms,
    grad: Vec<f64>,
}

fn check_target(shape: &[usize], target: &LabelMap) -> Result<(usize, usize, usize)> {
    let [b, k, h, w] = shape else {
        return Err(Error::shape("ce_log_dice_loss", "logits", "(B, K, H, W)", shape));
    };
    if target.batch() != *b || target.height() != *h || target.width() != *w {
        return Err(Error::shape("ce_log_dice_loss", "target", (b, h, w), target.shape()));
    }
    if *k < 2 {
        return Err(Error::Config(format!("loss needs at least 2 classes, got {k}")));
    }
    target.validate(*k)?;
    Ok((*b, *k, h * w))
}

fn evaluate<T: Element>(logits: &Tensor<T>, target: &LabelMap, alpha: f64) -> Result<Evaluated> {
    let (b, k, hw) = check_target(logits.shape(), target)?;
    let n = (b * hw) as f64;
    let z = logits.data();
    let labels = target.data();

    let mut p = vec![0.0f64; z.len()];
    let mut ce = 0.0;
    for bi in 0..b {
        for q in 0..hw {
            let at = |c: usize| (bi * k + c) * hw + q;
            let max = (0..k).map(|c| z[at(c)].f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..k {
                let e = (z[at(c)].f64() - max).exp();
                p[at(c)] = e;
                denom += e;
            }
            for c in 0..k {
                p[at(c)] /= denom;
            }
            let y = labels[bi * hw + q] as usize;
            ce -= z[at(y)].f64() - max - denom.ln();
        }
    }
    ce /= n;

    // Per-class sums for the foreground classes.
    let fg = k - 1;
    let (mut inter, mut psum, mut ysum) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for bi in 0..b {
        for q in 0..hw {
            let y = labels[bi * hw + q] as usize;
            for c in 1..k {
                let pc = p[(bi * k + c) * hw + q];
                psum[c] += pc;
                if c == y {
                    inter[c] += pc;
                    ysum[c] += 1.0;
                }
            }
        }
    }
    let denom: Vec<f64> = (0..k).map(|c| psum[c] + ysum[c] + DICE_EPS).collect();
    let dice: Vec<f64> = (1..k).map(|c| (2.0 * inter[c] + DICE_EPS) / denom[c]).collect();
    let mean_dice = dice.iter().sum::<f64>() / fg as f64;
    let log_dice = -mean_dice.ln();

    // dL/dp for the Dice term, then through the softmax together with CE.
    let mut grad = vec![0.0f64; z.len()];
    let mut gp = vec![0.0f64; k];
    for bi in 0..b {
        for q in 0..hw {
            let y = labels[bi * hw + q] as usize;
            let at = |c: usize| (bi * k + c) * hw + q;
            gp[0] = 0.0;
            for c in 1..k {
                let yc = if c == y { 1.0 } else { 0.0 };
                gp[c] = -(2.0 * yc - dice[c - 1]) / (denom[c] * mean_dice * fg as f64);
            }
            let dot: f64 = (0..k).map(|c| p[at(c)] * gp[c]).sum();
            for c in 0..k {
                let pc = p[at(c)];
                let yc = if c == y { 1.0 } else { 0.0 };
                grad[at(c)] = alpha * (pc - yc) / n + (1.0 - alpha) * pc * (gp[c] - dot);
            }
        }
    }

    Ok(Evaluated {
        terms: LossTerms {
            cross_entropy: ce,
            dice,
            log_dice,
            total: alpha * ce + (1.0 - alpha) * log_dice,
        },
        grad,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("loss alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Loss terms of `logits` (B, K, H, W) against `target` without recording.
pub fn loss_terms<T: Element>(logits: &Tensor<T>, target: &LabelMap, alpha: f64) -> Result<LossTerms> {
    check_alpha(alpha)?;
    Ok(evaluate(logits, target, alpha)?.terms)
}

/// Scalar training loss; the gradient with respect to the logits is
/// computed in closed form during the forward pass.
pub fn ce_log_dice_loss<'t, T: Element>(logits: &Var<'t, T>, target: &LabelMap, alpha: f64) -> Result<Var<'t, T>> {
    check_alpha(alpha)?;
    let ev = evaluate(&logits.value(), target, alpha)?;
    let shape = logits.shape();
    let grad = Tensor::from_vec(&shape, ev.grad.into_iter().map(T::of).collect())?;
    Ok(logits.tape().record(
        "ce_log_dice_loss",
        Tensor::scalar(T::of(ev.terms.total)),
        &[*logits],
        move |g| {
            let s = g.data()[0];
            vec![Some(grad.map(|v| v * s))]
        },
    ))
}
