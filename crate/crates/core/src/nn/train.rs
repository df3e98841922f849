//! Minibatch SGD on binary cross-entropy with an L2 penalty.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Network;
use crate::data::{ChannelImage, Dataset};
use crate::seed::{rng_for, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub l2_coefficient: f64,
    /// Enables dropout layers during training.
    pub dropout: bool,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 16,
            max_epochs: 50,
            l2_coefficient: 1e-4,
            dropout: true,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.l2_coefficient >= 0.0) {
            return Err(Error::InvalidArgument("l2 coefficient must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument(
                "batch size, max epochs and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based; 0 if none ran).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

// Numerically stable BCE on the logit: softplus(z) - y z.
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// Mean BCE over the batch plus `l2 · ‖θ‖² / 2`, and its gradient.
///
/// Per-example gradients may be computed in parallel; they are summed in
/// batch order, so the result does not depend on the thread count. Dropout
/// masks come from per-example streams seeded by one draw from `rng`.
pub fn loss_and_gradients(
    net: &Network,
    batch: &[(&ChannelImage, u8)],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient batch is empty".into()));
    }
    for (img, _) in batch {
        net.check_input(img)?;
    }
    let base = rng.random::<u64>();
    let per: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, (img, label))| {
            let mut drng = rng_for(&[base, i as u64]);
            let t = net.trace(img.values(), cfg.dropout.then_some(&mut drng));
            let z = t.logit();
            let y = f64::from(*label);
            let mut g = vec![0.0; net.param_count()];
            net.backward(&t, super::layers::sigmoid(z) - y, &mut g);
            (bce_from_logit(z, y), g)
        })
        .collect();

    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.param_count()];
    for (l, g) in &per {
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    if cfg.l2_coefficient > 0.0 {
        let l2 = cfg.l2_coefficient;
        loss += 0.5 * l2 * net.params.iter().map(|p| p * p).sum::<f64>();
        grad.iter_mut().zip(&net.params).for_each(|(g, p)| *g += l2 * p);
    }
    Ok((loss, grad))
}

/// Mean BCE (no penalty) and accuracy at threshold 0.5, dropout off.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let per: Vec<(f64, bool)> = data
        .samples()
        .par_iter()
        .map(|s| {
            net.check_input(&s.image)?;
            let t = net.trace(s.image.values(), None);
            let y = f64::from(s.label);
            let predicted = u8::from(t.output() >= 0.5);
            Ok((bce_from_logit(t.logit(), y), predicted == s.label))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per.iter().filter(|p| p.1).count() as f64 / n;
    Ok((loss, acc))
}

/// Trains a copy of `net`. With a validation set, training stops once the
/// validation loss has not improved for `patience` epochs and the best
/// parameters are restored.
pub fn train(
    net: &Network,
    train_set: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Network, History)> {
    cfg.validate()?;
    train_set.require_both_classes()?;
    let mut net = net.clone();
    let mut history = History::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = rng_for(&[cfg.seed, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&ChannelImage, u8)> = chunk
                .iter()
                .map(|&i| (&train_set.samples()[i].image, train_set.samples()[i].label))
                .collect();
            let (_, grad) = loss_and_gradients(&net, &batch, cfg, &mut rng)?;
            net.params
                .iter_mut()
                .zip(&grad)
                .for_each(|(p, g)| *p -= cfg.learning_rate * g);
        }
        if net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "training diverged in epoch {epoch}; lower the learning rate"
            )));
        }

        let (train_loss, train_accuracy) = evaluate(&net, train_set)?;
        let (val_loss, val_accuracy) = match val {
            Some(v) => {
                let (l, a) = evaluate(&net, v)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        });

        let Some(vl) = val_loss else {
            history.best_epoch = epoch;
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| vl < *b) {
            best = Some((vl, net.params.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        net.params = params;
    }
    Ok((net, history))
}
