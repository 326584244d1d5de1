//! Layer and batch normalization.
//!
//! Affine parameters are per channel (dimension 1) and broadcast over every
//! other dimension.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Element> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }
}

fn check_affine<T: Element>(
    op: &'static str,
    channels: usize,
    gain: Option<&Var<'_, T>>,
    bias: Option<&Var<'_, T>>,
) -> Result<()> {
    for p in [gain, bias].into_iter().flatten() {
        if p.shape() != [channels] {
            return Err(Error::shape(op, "affine parameter", [channels], p.shape()));
        }
    }
    Ok(())
}

/// Backward of `y = xhat * gamma[c] + beta[c]` where `xhat` was normalized
/// in groups. `members(grp)` lists flat indices of one group.
struct NormBackward<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    gain: Option<Tensor<T>>,
    channels: usize,
    inner: usize,
}

impl<T: Element> NormBackward<T> {
    fn channel_of(&self, i: usize) -> usize {
        (i / self.inner) % self.channels
    }

    fn affine_grads(&self, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let mut gg = Tensor::zeros(&[self.channels]);
        let mut gb = Tensor::zeros(&[self.channels]);
        for (i, (&gv, &xh)) in g.data().iter().zip(self.xhat.data()).enumerate() {
            let c = self.channel_of(i);
            gg.data_mut()[c] += gv * xh;
            gb.data_mut()[c] += gv;
        }
        (gg, gb)
    }

    fn input_grad(&self, g: &Tensor<T>, groups: &[Vec<usize>]) -> Tensor<T> {
        let mut gx = Tensor::zeros(g.shape());
        let dxhat: Vec<T> = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gv)| match &self.gain {
                Some(gain) => gv * gain.data()[self.channel_of(i)],
                None => gv,
            })
            .collect();
        for (grp, idx) in groups.iter().enumerate() {
            let n = T::of(idx.len() as f64);
            let (mut s1, mut s2) = (T::zero(), T::zero());
            for &i in idx {
                s1 += dxhat[i];
                s2 += dxhat[i] * self.xhat.data()[i];
            }
            let (m1, m2) = (s1 / n, s2 / n);
            for &i in idx {
                gx.data_mut()[i] = self.inv_std[grp] * (dxhat[i] - m1 - self.xhat.data()[i] * m2);
            }
        }
        gx
    }
}

fn apply_affine<T: Element>(
    xhat: &Tensor<T>,
    gain: Option<&Tensor<T>>,
    bias: Option<&Tensor<T>>,
    channels: usize,
    inner: usize,
) -> Tensor<T> {
    Tensor::from_fn(xhat.shape(), |i| {
        let c = (i / inner) % channels;
        let mut v = xhat.data()[i];
        if let Some(g) = gain {
            v *= g.data()[c];
        }
        if let Some(b) = bias {
            v += b.data()[c];
        }
        v
    })
}

impl<'t, T: Element> Var<'t, T> {
    /// Normalizes over the trailing `last_n` dimensions to zero mean and unit
    /// (biased) variance, then applies per-channel `gain` and `bias`.
    pub fn layer_norm(
        &self,
        last_n: usize,
        gain: Option<&Var<'t, T>>,
        bias: Option<&Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if last_n == 0 || last_n > shape.len() {
            return Err(Error::shape(
                "layer_norm",
                "last_n",
                format!("1..={}", shape.len()),
                last_n,
            ));
        }
        let channels = if shape.len() >= 2 { shape[1] } else { 1 };
        let inner: usize = shape.get(2..).map_or(1, |s| s.iter().product());
        check_affine("layer_norm", channels, gain, bias)?;

        let group_len: usize = shape[shape.len() - last_n..].iter().product();
        let n_groups = x.len() / group_len;
        let mut xhat = Tensor::zeros(&shape);
        let mut inv_std = Vec::with_capacity(n_groups);
        for grp in 0..n_groups {
            let src = &x.data()[grp * group_len..(grp + 1) * group_len];
            let n = T::of(group_len as f64);
            let mean = src.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = src.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let is = T::one() / (var + T::of(NORM_EPS)).sqrt();
            for (d, &v) in xhat.data_mut()[grp * group_len..(grp + 1) * group_len]
                .iter_mut()
                .zip(src)
            {
                *d = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let gv = gain.map(|g| (*g.value()).clone());
        let bv = bias.map(|b| b.value());
        let out = apply_affine(&xhat, gv.as_ref(), bv.as_deref(), channels, inner);

        let mut parents = vec![*self];
        parents.extend(gain.copied());
        parents.extend(bias.copied());
        let (has_gain, has_bias) = (gain.is_some(), bias.is_some());
        let bw = NormBackward {
            xhat,
            inv_std,
            gain: gv,
            channels,
            inner,
        };
        Ok(self.tape().record("layer_norm", out, &parents, move |g| {
            let groups: Vec<Vec<usize>> = (0..n_groups)
                .map(|grp| (grp * group_len..(grp + 1) * group_len).collect())
                .collect();
            let mut grads = vec![Some(bw.input_grad(g, &groups))];
            let (gg, gb) = bw.affine_grads(g);
            if has_gain {
                grads.push(Some(gg));
            }
            if has_bias {
                grads.push(Some(gb));
            }
            grads
        }))
    }

    /// Batch normalization of a (B, C, H, W) tensor. In training mode the
    /// batch statistics are used and the updated running statistics
    /// (momentum [`BN_MOMENTUM`], unbiased variance) are returned.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        running: &BnStats<T>,
        training: bool,
    ) -> Result<(Var<'t, T>, Option<BnStats<T>>)> {
        let x = self.value();
        let (b, c, h, w) = x.dims4("batch_norm")?;
        check_affine("batch_norm", c, Some(gamma), Some(beta))?;
        if running.mean.shape() != [c] || running.var.shape() != [c] {
            return Err(Error::shape("batch_norm", "running stats", [c], running.mean.shape()));
        }
        let hw = h * w;
        let n = b * hw;
        let members = move |ch: usize| -> Vec<usize> {
            (0..b)
                .flat_map(move |bi| ((bi * c + ch) * hw)..((bi * c + ch + 1) * hw))
                .collect()
        };

        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        let mut updated = None;
        if training {
            let mut new_stats = running.clone();
            let m = T::of(BN_MOMENTUM);
            for ch in 0..c {
                let idx = members(ch);
                let nn = T::of(n as f64);
                let mu = idx.iter().fold(T::zero(), |a, &i| a + x.data()[i]) / nn;
                let ss = idx.iter().fold(T::zero(), |a, &i| {
                    let d = x.data()[i] - mu;
                    a + d * d
                });
                let var = ss / nn;
                let unbiased = if n > 1 { ss / T::of((n - 1) as f64) } else { var };
                mean[ch] = mu;
                inv_std[ch] = T::one() / (var + T::of(NORM_EPS)).sqrt();
                let rm = &mut new_stats.mean.data_mut()[ch];
                *rm = (T::one() - m) * *rm + m * mu;
                let rv = &mut new_stats.var.data_mut()[ch];
                *rv = (T::one() - m) * *rv + m * unbiased;
            }
            updated = Some(new_stats);
        } else {
            for ch in 0..c {
                mean[ch] = running.mean.data()[ch];
                inv_std[ch] = T::one() / (running.var.data()[ch] + T::of(NORM_EPS)).sqrt();
            }
        }

        let xhat = Tensor::from_fn(x.shape(), |i| {
            let ch = (i / hw) % c;
            (x.data()[i] - mean[ch]) * inv_std[ch]
        });
        let gv = (*gamma.value()).clone();
        let out = apply_affine(&xhat, Some(&gv), Some(&beta.value()), c, hw);
        let bw = NormBackward {
            xhat,
            inv_std,
            gain: Some(gv),
            channels: c,
            inner: hw,
        };
        let y = self
            .tape()
            .record("batch_norm", out, &[*self, *gamma, *beta], move |g| {
                let gx = if training {
                    let groups: Vec<Vec<usize>> = (0..c).map(members).collect();
                    bw.input_grad(g, &groups)
                } else {
                    let gain = bw.gain.as_ref().unwrap();
                    Tensor::from_fn(g.shape(), |i| {
                        let ch = (i / hw) % c;
                        g.data()[i] * gain.data()[ch] * bw.inv_std[ch]
                    })
                };
                let (gg, gb) = bw.affine_grads(g);
                vec![Some(gx), Some(gg), Some(gb)]
            });
        Ok((y, updated))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4], 7.0));
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = x.layer_norm(2, Some(&g), Some(&b)).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rejects_bad_last_n() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(x.layer_norm(3, None, None).is_err());
        assert!(x.layer_norm(0, None, None).is_err());
    }

    #[test]
    fn batch_norm_constant_channel_trains_to_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 1, 2, 2], 3.0));
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let (y, stats) = x.batch_norm(&g, &b, &BnStats::new(1), true).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let stats = stats.unwrap();
        assert!((stats.mean.data()[0] - 0.3).abs() < 1e-12);
        assert!((stats.var.data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_inference_with_unit_stats_is_affine_identity() {
        let tape = Tape::<f64>::new();
        let t = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 - 3.0);
        let x = tape.constant(t.clone());
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, stats) = x.batch_norm(&g, &b, &BnStats::new(2), false).unwrap();
        assert!(stats.is_none());
        assert!(y.value().max_abs_diff(&t) < 1e-4);
    }
}
