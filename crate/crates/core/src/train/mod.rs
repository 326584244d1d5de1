//! Loss, schedule, augmentation, optimizer and the training loop.

pub mod augment;
pub mod loss;
pub mod optim;
pub mod schedule;

pub use augment::{augment, warp, AugmentationSpec, Geometry, MAX_ROTATION_DEG};
pub use loss::{ce_log_dice_loss, loss_terms, LossTerms, DICE_EPS};
pub use optim::{Optimizer, Sgd};
pub use schedule::{poly_lr, POLY_POWER};

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::autograd::Tape;
use crate::data::{collate, SegmentationSample};
use crate::error::{Error, Result};
use crate::metrics::{iou_dice, ConfusionCounts, MetricsReport};
use crate::network::Network;
use crate::nn::Ctx;
use crate::rng::{self, Domain};
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub total_iters: usize,
    pub loss_alpha: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// `None` trains on the raw samples.
    pub augmentation: Option<AugmentationSpec>,
    /// Validation period in iterations; 0 disables validation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr_init: 1e-3,
            total_iters: 200,
            loss_alpha: 0.5,
            seed: 0,
            optimizer: Optimizer::default(),
            augmentation: Some(AugmentationSpec::default()),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Recipe for the 200-iteration desk runs on 64×64 synthetic data. At
    /// this budget a higher learning rate helps and augmentation only slows
    /// convergence.
    pub fn desk(seed: u64) -> Self {
        Self {
            lr_init: 3e-3,
            augmentation: None,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr_init >= 0.0 && self.lr_init.is_finite()) {
            return Err(Error::Config(format!(
                "lr_init must be finite and >= 0, got {}",
                self.lr_init
            )));
        }
        if !(0.0..=1.0).contains(&self.loss_alpha) {
            return Err(Error::Config(format!(
                "loss alpha must lie in [0, 1], got {}",
                self.loss_alpha
            )));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// (iteration, loss) for every iteration.
    pub losses: Vec<(usize, f64)>,
    /// (iteration, held-out mean Dice in percent).
    pub validation: Vec<(usize, f64)>,
}

impl TrainReport {
    /// `iter<TAB>loss` lines.
    pub fn loss_curve(&self) -> String {
        let mut s = String::new();
        for (i, l) in &self.losses {
            let _ = writeln!(s, "{i}\t{l}");
        }
        s
    }

    /// Mean loss over the first and last `window` iterations.
    pub fn head_tail_means(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.losses.len();
        if n == 0 || window == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |s: &[(usize, f64)]| s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[n - w..])))
    }
}

/// Endless stream of sample indices, reshuffled each epoch.
struct BatchSampler {
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            seed,
            epoch: 0,
            order: (0..n).collect(),
            pos: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = rng::stream(self.seed, Domain::Shuffle, self.epoch);
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.epoch += 1;
                    self.pos = 0;
                    self.shuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Trains `net` in place. Deterministic for a fixed configuration.
pub fn train(
    net: &mut Network<f32>,
    data: &[SegmentationSample],
    cfg: &TrainConfig,
    validation: Option<&[SegmentationSample]>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut opt = Sgd::new(cfg.optimizer)?;
    let mut report = TrainReport::default();

    for iter in 0..cfg.total_iters {
        let lr = poly_lr(cfg.lr_init, iter, cfg.total_iters);
        let ids = sampler.next_batch(cfg.batch_size);
        let batch: Vec<SegmentationSample> = ids
            .iter()
            .enumerate()
            .map(|(slot, &i)| match &cfg.augmentation {
                Some(spec) => {
                    let draw = (iter * cfg.batch_size + slot) as u64;
                    augment(&data[i], spec, &mut rng::stream(cfg.seed, Domain::Augment, draw))
                }
                None => Ok(data[i].clone()),
            })
            .collect::<Result<_>>()?;
        let (images, masks) = collate(&batch.iter().collect::<Vec<_>>())?;

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &net.store, true, true);
        let logits = net.forward(&ctx, tape.constant(images))?;
        let loss = ce_log_dice_loss(&logits, &masks, cfg.loss_alpha)?;
        let value = loss.value().data()[0].f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter,
                lr,
                batch_ids: ids.iter().map(|&i| data[i].id.clone()).collect(),
            });
        }
        tape.backward(loss)?;
        let grads = ctx.grads();
        let updates = ctx.take_updates();
        drop(ctx);
        net.store.apply_updates(updates);
        opt.step(&mut net.store, &grads, lr);
        report.losses.push((iter, value));

        if cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0 {
            if let Some(val) = validation {
                let r = evaluate(net, val)?;
                report.validation.push((iter + 1, r.mean_dice.unwrap_or(0.0)));
            }
        }
    }
    Ok(report)
}

pub const EVAL_BATCH: usize = 8;

/// Confusion counts of the network's argmax predictions over `samples`.
pub fn confusion<T: Element>(net: &Network<T>, samples: &[SegmentationSample]) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::new(net.cfg.num_classes);
    for chunk in samples.chunks(EVAL_BATCH) {
        let (images, masks) = collate(&chunk.iter().collect::<Vec<_>>())?;
        let pred = net.predict(&images.cast())?;
        let pred = if pred.shape().len() == 2 {
            crate::tensor::LabelMap::new(&[1, pred.height(), pred.width()], pred.data().to_vec())?
        } else {
            pred
        };
        counts.accumulate(&pred, &masks)?;
    }
    Ok(counts)
}

pub fn evaluate<T: Element>(net: &Network<T>, samples: &[SegmentationSample]) -> Result<MetricsReport> {
    Ok(iou_dice(&confusion(net, samples)?))
}
