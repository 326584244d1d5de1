//! Named parameter storage, per-forward bindings and the basic layers
//! (convolution, batch norm, layer norm) shared by every block.
//!
//! Layers hold [`ParamId`]s only, so one layer structure can be
//! instantiated over an `f32` store for training and an `f64` store for
//! gradient checks.

use std::cell::RefCell;

use crate::autograd::{Tape, Var};
use crate::error::{CheckpointError, Error, Result};
use crate::ops::{BnStats, ConvSpec};
use crate::rng::{self, Rng};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Ordered, uniquely named tensors: trainable parameters and buffers
/// (batch-norm running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(CheckpointError::NameCollision(name).into());
        }
        self.entries.push(Entry { name, value, trainable });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value, e.trainable))
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Replaces values by name from `(name, tensor)` pairs. Every entry of
    /// the store must be present with a matching shape.
    pub fn load_values(&mut self, values: &[(String, Tensor<T>)]) -> Result<()> {
        for e in &mut self.entries {
            let (_, v) = values
                .iter()
                .find(|(n, _)| *n == e.name)
                .ok_or_else(|| CheckpointError::Missing(e.name.clone()))?;
            if v.shape() != e.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: e.name.clone(),
                    expected: e.value.shape().to_vec(),
                    got: v.shape().to_vec(),
                }
                .into());
            }
            e.value = v.clone();
        }
        Ok(())
    }
}

/// One forward pass: binds store entries to tape leaves on first use and
/// collects running-statistics updates.
pub struct Ctx<'t, 's, T> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
    training: bool,
    track_grads: bool,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'t, 's, T: Element> Ctx<'t, 's, T> {
    /// `training` selects batch statistics in batch norm; `track_grads`
    /// makes parameters differentiable leaves.
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, training: bool, track_grads: bool) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            training,
            track_grads,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let requires = self.track_grads && self.store.is_trainable(id);
        let v = self.tape.leaf(self.store.get(id).clone(), requires);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Binds `id` to an existing variable instead of a fresh leaf, so a
    /// parameter can be driven from outside (gradient checks).
    pub fn bind(&self, id: ParamId, var: Var<'t, T>) -> Result<()> {
        let expected = self.store.get(id).shape();
        if var.shape() != expected {
            return Err(Error::shape(
                "bind",
                self.store.name(id).to_string(),
                expected,
                var.shape(),
            ));
        }
        self.bound.borrow_mut()[id.0] = Some(var);
        Ok(())
    }

    pub fn buffer(&self, id: ParamId) -> &'s Tensor<T> {
        self.store.get(id)
    }

    pub fn push_update(&self, id: ParamId, value: Tensor<T>) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Gradients of every bound trainable parameter after backward.
    pub fn grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.store.is_trainable(ParamId(i)) {
                    return None;
                }
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()));
                Some((ParamId(i), g))
            })
            .collect()
    }

    pub fn take_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

impl<T: Element> ParamStore<T> {
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, v) in updates {
            self.entries[id.0].value = v;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He,
    Zeros,
    /// Normal with standard deviation `gain * sqrt(2 / fan_in)`.
    ScaledHe(f64),
}

fn init_tensor<T: Element>(shape: &[usize], fan_in: usize, init: Init, rng: &mut Rng) -> Tensor<T> {
    let std = match init {
        Init::Zeros => return Tensor::zeros(shape),
        Init::He => (2.0 / fan_in as f64).sqrt(),
        Init::ScaledHe(g) => g * (2.0 / fan_in as f64).sqrt(),
    };
    Tensor::from_fn(shape, |_| T::of(std * rng::normal(rng)))
}

/// Convolution with its own weight and optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
}

impl Conv {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        spec: ConvSpec,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        spec.validate(in_channels)?;
        let shape = spec.weight_shape(in_channels);
        let fan_in = shape[1] * shape[2] * shape[3];
        let weight = store.add(format!("{name}.weight"), init_tensor(&shape, fan_in, init, rng), true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]), true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            spec,
            in_channels,
        })
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        x.conv2d(&w, b.as_ref(), &self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count(self.in_channels, self.bias.is_some())
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let stats = BnStats::<T>::new(channels);
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), stats.mean, false)?,
            running_var: store.add(format!("{name}.running_var"), stats.var, false)?,
        })
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let running = BnStats {
            mean: ctx.buffer(self.running_mean).clone(),
            var: ctx.buffer(self.running_var).clone(),
        };
        let (y, updated) = x.batch_norm(&ctx.param(self.gamma), &ctx.param(self.beta), &running, ctx.training())?;
        if let Some(s) = updated {
            ctx.push_update(self.running_mean, s.mean);
            ctx.push_update(self.running_var, s.var);
        }
        Ok(y)
    }
}

/// Layer norm over the trailing `last_n` dimensions with per-channel affine
/// parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub last_n: usize,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, last_n: usize) -> Result<Self> {
        if last_n == 0 {
            return Err(Error::Config("layer norm over zero dimensions".into()));
        }
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[channels], T::one()), true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true)?,
            last_n,
        })
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(self.last_n, Some(&ctx.param(self.gain)), Some(&ctx.param(self.bias)))
    }
}

/// 3×3 convolution, batch norm, ReLU: the VGG and UNet+ building block.
/// The convolution has no bias since batch norm would cancel it.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(
                store,
                rng,
                &format!("{name}.conv"),
                in_channels,
                ConvSpec::new(3, out_channels),
                false,
                Init::He,
            )?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels)?,
        })
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv.forward(ctx, x)?;
        Ok(self.bn.forward(ctx, y)?.relu())
    }
}
