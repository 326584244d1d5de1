//! Elementwise arithmetic and reductions.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn same_shape<T: Element>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, "operands", sa, sb));
    }
    Ok(())
}

fn zip_with<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("shapes checked by caller")
}

impl<'t, T: Element> Var<'t, T> {
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("add", self, other)?;
        let out = zip_with(&self.value(), &other.value(), |x, y| x + y);
        Ok(self
            .tape()
            .record("add", out, &[*self, *other], |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("sub", self, other)?;
        let out = zip_with(&self.value(), &other.value(), |x, y| x - y);
        Ok(self.tape().record("sub", out, &[*self, *other], |g| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("mul", self, other)?;
        let (a, b) = (self.value(), other.value());
        let out = zip_with(&a, &b, |x, y| x * y);
        Ok(self.tape().record("mul", out, &[*self, *other], move |g| {
            vec![
                Some(zip_with(g, &b, |gv, y| gv * y)),
                Some(zip_with(g, &a, |gv, x| gv * x)),
            ]
        }))
    }

    pub fn scale(&self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let out = self.value().map(|v| v * s);
        self.tape()
            .record("scale", out, &[*self], move |g| vec![Some(g.map(|v| v * s))])
    }

    /// Elementwise product with a constant tensor (no gradient to `c`).
    pub fn mul_const(&self, c: &Tensor<T>) -> Result<Var<'t, T>> {
        if self.shape() != c.shape() {
            return Err(Error::shape("mul_const", "operands", self.shape(), c.shape()));
        }
        let out = zip_with(&self.value(), c, |x, y| x * y);
        let c = c.clone();
        Ok(self.tape().record("mul_const", out, &[*self], move |g| {
            vec![Some(zip_with(g, &c, |gv, y| gv * y))]
        }))
    }

    /// Multiplies (B,C,H,W) by a (B,1,H,W) map broadcast over channels.
    pub fn mul_spatial(&self, weights: &Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weights.value();
        let (b, c, h, wd) = x.dims4("mul_spatial")?;
        if w.shape() != [b, 1, h, wd] {
            return Err(Error::shape("mul_spatial", "weights", [b, 1, h, wd], w.shape()));
        }
        let hw = h * wd;
        let mut out = Tensor::zeros(x.shape());
        {
            let o = out.data_mut();
            for bi in 0..b {
                let wrow = &w.data()[bi * hw..(bi + 1) * hw];
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    for p in 0..hw {
                        o[base + p] = x.data()[base + p] * wrow[p];
                    }
                }
            }
        }
        Ok(self.tape().record("mul_spatial", out, &[*self, *weights], move |g| {
            let mut gx = Tensor::zeros(x.shape());
            let mut gw = Tensor::zeros(w.shape());
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    for p in 0..hw {
                        let gv = g.data()[base + p];
                        gx.data_mut()[base + p] = gv * w.data()[bi * hw + p];
                        gw.data_mut()[bi * hw + p] += gv * x.data()[base + p];
                    }
                }
            }
            vec![Some(gx), Some(gw)]
        }))
    }

    /// Adds a per-channel vector (length C) to a tensor of rank ≥ 2,
    /// broadcasting over every other dimension.
    pub fn add_channel_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 || bias.shape() != [shape[1]] {
            return Err(Error::shape("add_channel_bias", "bias", shape.get(1), bias.shape()));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let bv = bias.value();
        let out = Tensor::from_fn(&shape, |i| x.data()[i] + bv.data()[(i / inner) % c]);
        Ok(self.tape().record("add_channel_bias", out, &[*self, *bias], move |g| {
            let mut gb = Tensor::zeros(&[c]);
            for (i, &gv) in g.data().iter().enumerate() {
                gb.data_mut()[(i / inner) % c] += gv;
            }
            vec![Some(g.clone()), Some(gb)]
        }))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.tape().record("sum", out, &[*self], move |g| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value_ref().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }
}
