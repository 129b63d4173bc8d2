//! Supervised pretraining of the toy segmentation model.
//!
//! Batches are drawn with box prompts. A fraction of batches runs without
//! injection; the rest pick a random injection strategy and stage count, so
//! the checkpoint has seen every encoder-side prompt variant it may be
//! evaluated with.

use batta_core::{dice, PromptSet};
use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, EpochRecord, TrainingMetadata};
use crate::data::{dihedral, image_batch, mask_batch, Sample};
use crate::encoder::InjectionStrategy;
use crate::error::{invalid, Result};
use crate::loss::supervised_loss;
use crate::model::{ModelConfig, SegModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Probability that a batch is trained without any injection.
    pub no_injection_prob: f64,
    /// Random flips and transposes of each training sample.
    pub augment: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 4,
            no_injection_prob: 0.4,
            augment: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("pretrain lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.no_injection_prob) {
            return Err(invalid("no_injection_prob must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

pub fn box_prompts(samples: &[&Sample]) -> Result<Vec<PromptSet>> {
    samples.iter().map(|s| s.box_prompt()).collect()
}

/// Mean Dice of `model` on `samples` with box prompts, in batches.
pub fn mean_dice(model: &SegModel, samples: &[Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("no samples to score"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let results = model.segment(&image_batch(&refs)?, &box_prompts(&refs)?)?;
        for (r, s) in results.iter().zip(chunk) {
            total += dice(&r.mask, &s.mask)?;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Per-sample soft Dice, detached; regression target for the confidence head.
fn soft_dice_target(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let b = logits.dim(0)?;
    let p = candle_nn::ops::sigmoid(&logits.detach())?.reshape((b, ()))?;
    let g = gt.reshape((b, ()))?;
    let inter = (&p * &g)?.sum(1)?;
    let denom = ((p.sum(1)? + g.sum(1)?)? + 1.0)?;
    Ok((((inter * 2.0)? + 1.0)? / denom)?)
}

fn random_injection(rng: &mut ChaCha8Rng, cfg: &PretrainConfig, max_stages: usize) -> (InjectionStrategy, usize) {
    if max_stages == 0 || rng.random_bool(cfg.no_injection_prob) {
        return (InjectionStrategy::None, 0);
    }
    let choices = &InjectionStrategy::ALL[1..];
    let strategy = choices[rng.random_range(0..choices.len())];
    (strategy, rng.random_range(1..=max_stages))
}

/// Trains from the config's seeded initialisation and returns the checkpoint
/// with the best validation Dice (evaluated without injection).
pub fn pretrain(
    train: &[Sample],
    val: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut eval_cfg = model_cfg.clone();
    eval_cfg.encoder.injection_strategy = InjectionStrategy::None;
    eval_cfg.encoder.injection_stages = 0;
    let (mut model, params) = SegModel::init(&eval_cfg)?;
    let mut metadata = TrainingMetadata {
        seed,
        epochs: cfg.epochs,
        lr: cfg.lr,
        ..Default::default()
    };
    let mut best = params.snapshot()?;
    if cfg.epochs == 0 {
        return Ok(Checkpoint {
            config: eval_cfg,
            metadata,
            weights: best,
        });
    }
    let mut opt = AdamW::new(
        params.trainable(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let max_stages = model_cfg.encoder.num_stages();
    let mut best_dice = f64::NEG_INFINITY;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let owned: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        dihedral(&train[i], rng.random_range(0..8u8))
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let batch: Vec<&Sample> = owned.iter().collect();
            let (strategy, stages) = random_injection(&mut rng, cfg, max_stages);
            model.set_injection(strategy, stages, 1.0)?;
            let images = image_batch(&batch)?;
            let gt = mask_batch(&batch)?;
            let out = model.forward(&images, &box_prompts(&batch)?)?;
            let parts = supervised_loss(&out.logits, &gt)?;
            let target = soft_dice_target(&out.logits, &gt)?;
            let conf_loss = (&out.confidence - target)?.sqr()?.mean_all()?;
            let loss = (&parts.total + conf_loss)?;
            opt.backward_step(&loss)?;
            loss_sum += parts.total.to_scalar::<f32>()? as f64;
            batches += 1;
            metadata.steps += 1;
        }
        model.set_injection(InjectionStrategy::None, 0, 1.0)?;
        let val_dice = if val.is_empty() {
            mean_dice(&model, train, cfg.batch_size)?
        } else {
            mean_dice(&model, val, cfg.batch_size)?
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_dice,
        };
        on_epoch(&record);
        metadata.loss_curve.push(record);
        if val_dice > best_dice {
            best_dice = val_dice;
            best = params.snapshot()?;
            metadata.best_epoch = Some(epoch);
            metadata.best_val_dice = Some(val_dice);
        }
    }
    Ok(Checkpoint {
        config: eval_cfg,
        metadata,
        weights: best,
    })
}
