//! Minibatch training and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::fusion::{prediction_loss, total_loss};
use crate::model::{forward, Model, ModelError, Prepared, Result, TrainStep};
use crate::optim::{clip_global_norm, AdamW};
use crate::params::Ctx;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub p_mask: f64,
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 10,
            seed: 7,
            p_mask: 0.15,
            grad_clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(("train.lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push(("train.weight_decay", format!("must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            out.push(("train.batch_size", "must be positive".to_string()));
        }
        if self.epochs == 0 {
            out.push(("train.epochs", "must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.p_mask) {
            out.push(("train.p_mask", format!("must lie in [0, 1), got {}", self.p_mask)));
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            out.push(("train.grad_clip", format!("must be positive, got {}", self.grad_clip_norm)));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub first_batch_loss: f64,
    pub mean_loss: f64,
    pub last_batch_loss: f64,
    /// Features masked on top of the genuinely missing ones.
    pub artificial_masks: usize,
    /// Rows entering the imputation loss.
    pub li_pairs: usize,
}

/// State needed to resume or reproduce the training stream.
#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub rng: RngState,
}

fn stream_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x7472_6169_6e21
}

/// Objective of one training minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub artificial_masks: usize,
    pub li_pairs: usize,
    /// Gradients by parameter name, when requested.
    pub grads: Option<BTreeMap<String, Vec<f64>>>,
}

/// Training-mode forward pass (gating noise, feature masking) and total loss.
pub fn batch_loss(
    model: &Model,
    prep: &Prepared,
    batch: &[usize],
    rng: &mut ChaCha8Rng,
    p_mask: f64,
    with_grads: bool,
) -> Result<BatchLoss> {
    let mut ctx = Ctx::new(&model.params, Some(&model.frozen), with_grads);
    let out = forward(&mut ctx, model, prep, batch, Some(TrainStep { rng, p_mask }))?;
    let targets: Vec<f64> = batch
        .iter()
        .map(|&i| model.stats.target.normalize(prep.samples[i].target))
        .collect();
    let lr = prediction_loss(&mut ctx, out.preds, &targets)?;
    let loss = total_loss(&mut ctx, lr, out.li, &model.config.fusion)?;
    let value = ctx.g.value(loss).item();
    let grads = if with_grads && value.is_finite() {
        Some(ctx.gradients(loss)?)
    } else {
        None
    };
    Ok(BatchLoss {
        value,
        artificial_masks: out.artificial_masks,
        li_pairs: out.li_pairs,
        grads,
    })
}

/// Phase 2 over prepared samples: shuffled minibatches, clipped gradients,
/// AdamW updates of the trainable parameters only.
pub fn train(model: &mut Model, prep: &Prepared, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, prep, cfg, |_, _| {})
}

/// As [`train`], calling `on_step(epoch, model)` after every update.
pub fn train_with(
    model: &mut Model,
    prep: &Prepared,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &Model),
) -> Result<TrainOutcome> {
    if prep.samples.is_empty() {
        return Err(ModelError::Invalid("training set has no target observations".into()));
    }
    let rng_seed = stream_seed(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..prep.samples.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut log = EpochLog {
            epoch,
            steps: 0,
            first_batch_loss: 0.0,
            mean_loss: 0.0,
            last_batch_loss: 0.0,
            artificial_masks: 0,
            li_pairs: 0,
        };
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let out = batch_loss(model, prep, batch, &mut rng, cfg.p_mask, true)?;
            if !out.value.is_finite() {
                return Err(ModelError::Diverged { epoch, step });
            }
            if step == 0 {
                log.first_batch_loss = out.value;
            }
            log.last_batch_loss = out.value;
            total += out.value;
            log.artificial_masks += out.artificial_masks;
            log.li_pairs += out.li_pairs;
            let mut grads = out.grads.unwrap_or_default();
            clip_global_norm(&mut grads, cfg.grad_clip_norm);
            opt.step(&mut model.params, &grads);
            log.steps += 1;
            on_step(epoch, model);
        }
        log.mean_loss = total / log.steps as f64;
        logs.push(log);
    }
    Ok(TrainOutcome {
        logs,
        rng: RngState {
            seed: rng_seed,
            word_pos: rng.get_word_pos(),
        },
    })
}

/// Error summary in raw target units.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub count: usize,
    pub per_region: BTreeMap<String, (f64, f64, usize)>,
    /// Raw-unit predictions in sample order.
    pub predictions: Vec<f64>,
}

/// `(rmse, mae)` of aligned pairs.
pub fn rmse_mae(preds: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(ModelError::Invalid(format!(
            "cannot score {} predictions against {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let n = preds.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    Ok(((se / n).sqrt(), ae / n))
}

/// Noise-free predictions, denormalized, scored against raw targets.
pub fn evaluate(model: &Model, prep: &Prepared, batch_size: usize) -> Result<Metrics> {
    if prep.samples.is_empty() {
        return Err(ModelError::Invalid("evaluation set has no target observations".into()));
    }
    let idx: Vec<usize> = (0..prep.samples.len()).collect();
    let mut predictions = Vec::with_capacity(idx.len());
    for batch in idx.chunks(batch_size.max(1)) {
        let mut ctx = Ctx::new(&model.params, Some(&model.frozen), false);
        let out = forward(&mut ctx, model, prep, batch, None)?;
        predictions.extend(ctx.g.value(out.preds).data().iter().map(|&z| model.stats.target.denormalize(z)));
    }
    let targets: Vec<f64> = prep.samples.iter().map(|s| s.target).collect();
    let (rmse, mae) = rmse_mae(&predictions, &targets)?;
    let mut grouped: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (s, p) in prep.samples.iter().zip(&predictions) {
        let e = grouped.entry(s.region.clone()).or_default();
        e.0.push(*p);
        e.1.push(s.target);
    }
    let mut per_region = BTreeMap::new();
    for (r, (p, t)) in grouped {
        let (a, b) = rmse_mae(&p, &t)?;
        per_region.insert(r, (a, b, p.len()));
    }
    Ok(Metrics {
        rmse,
        mae,
        count: predictions.len(),
        per_region,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_hand_values() {
        let (rmse, mae) = rmse_mae(&[1.0, 3.0], &[2.0, 5.0]).unwrap();
        assert_eq!(mae, 1.5);
        assert!((rmse - 1.581139).abs() < 1e-6);
        assert_eq!(rmse_mae(&[2.0], &[2.0]).unwrap(), (0.0, 0.0));
        assert!(rmse_mae(&[], &[]).is_err());
    }
}
