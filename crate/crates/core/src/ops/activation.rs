use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

impl<'t, T: Element> Var<'t, T> {
    pub fn relu(&self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v.max(T::zero()));
        self.tape().record("relu", out, &[*self], move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), data).unwrap())]
        })
    }

    /// Piecewise-linear clamp to [-1, 1]. The gradient is 1 strictly inside
    /// the interval and 0 outside.
    pub fn hardtanh(&self) -> Var<'t, T> {
        let x = self.value();
        let one = T::one();
        let out = x.map(|v| v.max(-one).min(one));
        self.tape().record("hardtanh", out, &[*self], move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv > -one && xv < one { gv } else { T::zero() })
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), data).unwrap())]
        })
    }

    /// Softmax along `dim`, max-shifted for stability.
    pub fn softmax(&self, dim: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if dim >= shape.len() {
            return Err(Error::shape("softmax", "dim", format!("< {}", shape.len()), dim));
        }
        let n = shape[dim];
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let mut out = Tensor::zeros(&shape);
        {
            let (xs, ys) = (x.data(), out.data_mut());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let m = (0..n).map(|k| xs[at(k)]).fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for k in 0..n {
                        let e = (xs[at(k)] - m).exp();
                        ys[at(k)] = e;
                        total += e;
                    }
                    for k in 0..n {
                        ys[at(k)] /= total;
                    }
                }
            }
        }
        let y = out.clone();
        Ok(self.tape().record("softmax", out, &[*self], move |g| {
            let mut gx = Tensor::zeros(y.shape());
            let (ys, gs) = (y.data(), g.data());
            let gxs = gx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot = (0..n).fold(T::zero(), |acc, k| acc + ys[at(k)] * gs[at(k)]);
                    for k in 0..n {
                        gxs[at(k)] = ys[at(k)] * (gs[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn hardtanh_values_and_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[4], &[0.5, 3.0, -7.0, -0.2]).unwrap(), true);
        let y = x.hardtanh();
        assert_eq!(y.value().data(), &[0.5, 1.0, -1.0, -0.2]);
        tape.backward(y.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_is_one_on_positive_inputs() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[3], &[0.1, 2.0, 5.0]).unwrap(), true);
        tape.backward(x.relu().sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[3], 0.7));
        let y = x.softmax(0).unwrap();
        for &v in y.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2], &[0.0, 2f64.ln()]).unwrap());
        let y = x.softmax(0).unwrap();
        assert!((y.value().data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y.value().data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_dim() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(x.softmax(2).is_err());
    }
}
