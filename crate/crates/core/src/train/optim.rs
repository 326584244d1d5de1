use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    /// Heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
    Momentum(f64),
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Momentum(0.9)
    }
}

/// Optimizer state; one velocity buffer per store entry.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    kind: Optimizer,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(kind: Optimizer) -> Result<Self> {
        if let Optimizer::Momentum(m) = kind {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("momentum must lie in [0, 1), got {m}")));
            }
        }
        Ok(Self {
            kind,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let lr = T::of(lr);
        for (id, g) in grads {
            let step = match self.kind {
                Optimizer::Sgd => g.clone(),
                Optimizer::Momentum(m) => {
                    let m = T::of(m);
                    let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    for (v, &g) in v.data_mut().iter_mut().zip(g.data()) {
                        *v = m * *v + g;
                    }
                    v.clone()
                }
            };
            for (p, &s) in store.get_mut(*id).data_mut().iter_mut().zip(step.data()) {
                *p -= lr * s;
            }
        }
    }
}
