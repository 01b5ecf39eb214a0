//! SGD-momentum training of classification loss plus the margin
//! regularizer, with global gradient clipping and step LR schedules.

use std::path::PathBuf;

use ndarray::{ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::DEFAULT_MAX_ITERATIONS;
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, CsvRow, MarginConvention};
use crate::model::{cross_entropy, predictions, MlpNetwork};
use crate::regularizer::{amm_regularizer, RegularizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub base_lr: f64,
    /// `(epoch, multiplier)`: from `epoch` on the rate is multiplied.
    pub lr_milestones: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_radius: f64,
    pub attack_iterations: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Off for regularizer-only training.
    pub classification_loss: bool,
    /// Validation margin every this many epochs (0 disables).
    pub margin_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            max_epochs: 40,
            base_lr: 0.1,
            lr_milestones: vec![(20, 0.1), (30, 0.1)],
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_radius: 10.0,
            attack_iterations: DEFAULT_MAX_ITERATIONS,
            seed: 0,
            shuffle: true,
            classification_loss: true,
            margin_every: 0,
        }
    }
}

impl TrainConfig {
    /// Linear classifier on the 2-D rectangles: regularizer only, batch 20,
    /// 1000 epochs, LR 0.1 halved every 250 epochs.
    pub fn toy() -> Self {
        Self {
            batch_size: 20,
            max_epochs: 1000,
            base_lr: 0.1,
            lr_milestones: vec![(250, 0.5), (500, 0.5), (750, 0.5)],
            classification_loss: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(self.clip_radius > 0.0) {
            return bad(format!("clip_radius must be > 0, got {}", self.clip_radius));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if let Some(&(e, m)) = self.lr_milestones.iter().find(|(_, m)| !(*m > 0.0)) {
            return bad(format!("lr multiplier at epoch {e} must be > 0, got {m}"));
        }
        Ok(())
    }
}

/// `base_lr` times every multiplier whose milestone is `<= epoch`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    config
        .lr_milestones
        .iter()
        .filter(|(e, _)| *e <= epoch)
        .fold(config.base_lr, |lr, (_, m)| lr * m)
}

/// Rescales all gradients jointly onto the ball of `radius` when their
/// global ℓ₂ norm exceeds it. Returns the norm before clipping.
pub fn clip_gradient(grads: &mut [ArrayD<f64>], radius: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > radius {
        let s = radius / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// Classic momentum with additive weight decay:
/// `g = grad + wd·p; v = μv + g; p -= lr·v`.
pub fn sgd_step(
    params: &mut [ArrayD<f64>],
    grads: &[ArrayD<f64>],
    velocity: &mut [ArrayD<f64>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape("sgd_step", &[params.len()], &[grads.len(), velocity.len()]));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() || velocity[i].shape() != params[i].shape() {
            return Err(Error::shape("sgd_step", params[i].shape(), g.shape()));
        }
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of parameter {i}"),
                index: pos,
            });
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        ndarray::Zip::from(&mut *p).and(g).and(&mut *v).for_each(|p, &g, v| {
            let g = g + weight_decay * *p;
            *v = momentum * *v + g;
            *p -= lr * *v;
        });
    }
    Ok(())
}

/// One row per completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch classification loss (0 when disabled).
    pub train_loss: f64,
    /// Mean batch value of `λ·L`.
    pub reg_value: f64,
    /// Misclassified fraction of training samples at their batch forward pass.
    pub train_error: f64,
    pub val_error: Option<f64>,
    pub val_margin: Option<f64>,
    pub mean_selected: f64,
    pub mean_incorrect: f64,
    pub degenerate: usize,
    pub unfooled: usize,
}

impl CsvRow for EpochRecord {
    const HEADER: &'static [&'static str] = &[
        "epoch",
        "lr",
        "train_loss",
        "reg_value",
        "train_error",
        "val_error",
        "val_margin",
        "mean_selected",
        "mean_incorrect",
        "degenerate",
        "unfooled",
    ];
}

/// Side channels of a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Rewritten atomically after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Stored next to the parameters in each checkpoint.
    pub extras: Vec<(String, ArrayD<f64>)>,
    pub verbose: bool,
}

pub struct TrainOutcome {
    pub net: MlpNetwork,
    pub history: Vec<EpochRecord>,
}

/// Trains `net` in place of a copy and returns it with its history.
///
/// Deterministic given the configs: batch order comes from a ChaCha stream
/// seeded with `config.seed`. With `λ = 0` the regularizer is never built.
pub fn train(
    mut net: MlpNetwork,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
    reg: &RegularizerConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    reg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    if train_set.dim() != net.input_dim() {
        return Err(Error::shape("train", &[train_set.dim()], &[net.input_dim()]));
    }
    let n = train_set.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity: Vec<ArrayD<f64>> = net.params().values().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut last_good: Option<PathBuf> = None;

    for epoch in 0..config.max_epochs {
        let lr = lr_at(config, epoch);
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut reg_sum, mut wrong) = (0.0, 0.0, 0usize);
        let (mut selected, mut incorrect, mut degenerate, mut unfooled) = (0usize, 0usize, 0usize, 0usize);
        let mut batches = 0usize;
        for (step, rows) in order.chunks(config.batch_size).enumerate() {
            let xb = train_set.inputs().select(Axis(0), rows);
            let yb: Vec<usize> = rows.iter().map(|&i| train_set.labels()[i]).collect();

            let tape = Tape::new();
            let bound = net.bind(&tape, true);
            let logits = bound.forward(&tape.constant(xb.clone().into_dyn()))?;
            let logit_values = logits.value().clone().into_dimensionality::<ndarray::Ix2>().expect("2-D logits");
            wrong += predictions(&logit_values).iter().zip(&yb).filter(|(p, y)| p != y).count();

            let mut total = if config.classification_loss {
                let ce = cross_entropy(&logits, &yb)?;
                loss_sum += ce.item();
                Some(ce)
            } else {
                None
            };
            if reg.lambda != 0.0 {
                let out = amm_regularizer(&bound, xb.view(), &yb, &logit_values, reg, config.attack_iterations)?;
                reg_sum += out.value.item();
                selected += out.stats.selected;
                incorrect += out.stats.incorrect;
                degenerate += out.stats.degenerate;
                unfooled += out.stats.unfooled;
                total = Some(match total {
                    Some(t) => t.add(&out.value)?,
                    None => out.value,
                });
            }
            batches += 1;
            let Some(total) = total else { continue };
            let diverged = || Error::Diverged {
                epoch,
                step,
                checkpoint: last_good.clone(),
            };
            if !total.item().is_finite() {
                return Err(diverged());
            }
            let mut grads = tape.grad(&total, &bound.param_refs(), false)?.into_values();
            drop(bound);
            clip_gradient(&mut grads, config.clip_radius);
            match sgd_step(net.params_mut().values_mut(), &grads, &mut velocity, lr, config.momentum, config.weight_decay) {
                Err(Error::NonFinite { .. }) => return Err(diverged()),
                other => other?,
            }
        }

        let val_error = val_set.map(|v| eval::error_rate(&net, v)).transpose()?;
        let val_margin = match val_set {
            Some(v) if config.margin_every > 0 && (epoch + 1) % config.margin_every == 0 => Some(eval::mean_margin(
                &net,
                v,
                config.attack_iterations,
                MarginConvention::AllZeroMisclassified,
            )?),
            _ => None,
        };
        let b = batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / b,
            reg_value: reg_sum / b,
            train_error: wrong as f64 / n as f64,
            val_error,
            val_margin,
            mean_selected: selected as f64 / b,
            mean_incorrect: incorrect as f64 / b,
            degenerate,
            unfooled,
        };
        if options.verbose {
            eprintln!(
                "epoch {:>4} lr {:.3e} loss {:.5} reg {:+.5} train-err {:.4} val-err {} margin {}",
                epoch,
                lr,
                record.train_loss,
                record.reg_value,
                record.train_error,
                record.val_error.map_or("-".into(), |v| format!("{v:.4}")),
                record.val_margin.map_or("-".into(), |v| format!("{v:.4}")),
            );
        }
        history.push(record);
        if let Some(path) = &options.checkpoint {
            let extras: Vec<(&str, &ArrayD<f64>)> = options.extras.iter().map(|(k, v)| (k.as_str(), v)).collect();
            net.save(path, &extras)?;
            last_good = Some(path.clone());
        }
    }
    Ok(TrainOutcome { net, history })
}
