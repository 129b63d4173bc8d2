//! Focal + Dice objective for supervised pretraining.

use candle_core::{Tensor, D};

use crate::error::{invalid, Result};

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct LossParts {
    pub focal: Tensor,
    pub dice: Tensor,
    pub total: Tensor,
}

/// log(1 + e^x) without overflow.
fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?
}

/// Mean sigmoid focal loss over every pixel.
pub fn focal_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let p = candle_nn::ops::sigmoid(logits)?;
    // binary cross entropy with logits: softplus(x) - y x
    let ce = (softplus(logits)? - (logits * gt)?)?;
    let p_t = ((&p * gt)? + ((1.0 - &p)? * (1.0 - gt)?)?)?;
    let alpha_t = ((gt * FOCAL_ALPHA)? + ((1.0 - gt)? * (1.0 - FOCAL_ALPHA))?)?;
    let modulator = (1.0 - p_t)?.powf(FOCAL_GAMMA)?;
    Ok((alpha_t * modulator)?.mul(&ce)?.mean_all()?)
}

/// Soft Dice loss on sigmoid probabilities, averaged over the batch.
pub fn dice_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let b = logits.dim(0)?;
    let p = candle_nn::ops::sigmoid(logits)?.reshape((b, ()))?;
    let g = gt.reshape((b, ()))?;
    let inter = (&p * &g)?.sum(D::Minus1)?;
    let denom = ((p.sum(D::Minus1)? + g.sum(D::Minus1)?)? + DICE_SMOOTH)?;
    let score = ((inter * 2.0)? + DICE_SMOOTH)?.div(&denom)?;
    Ok((1.0 - score)?.mean_all()?)
}

/// Focal + Dice. `gt` must hold only 0 and 1.
pub fn supervised_loss(logits: &Tensor, gt: &Tensor) -> Result<LossParts> {
    if logits.dims() != gt.dims() {
        return Err(invalid(format!("logits {:?} vs gt {:?}", logits.dims(), gt.dims())));
    }
    let values: Vec<f32> = gt.flatten_all()?.to_vec1()?;
    if values.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("ground-truth mask must be binary"));
    }
    let focal = focal_loss(logits, gt)?;
    let dice = dice_loss(logits, gt)?;
    let total = (&focal + &dice)?;
    Ok(LossParts { focal, dice, total })
}
