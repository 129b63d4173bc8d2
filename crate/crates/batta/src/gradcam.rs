//! Grad-CAM over encoder block activations.

use batta_core::{Grid, PromptSet};
use candle_core::{Tensor, Var, D};

use crate::error::{invalid, Result};
use crate::model::SegModel;

pub struct GradCam {
    pub map: Grid,
    /// Set when the prediction has no foreground, so there is nothing to explain.
    pub degenerate: bool,
}

/// Gradient-weighted channel mean of block `layer`'s output with respect to
/// the summed foreground logits, rectified and max-normalised.
pub fn gradcam_map(model: &SegModel, image: &Tensor, prompts: &PromptSet, layer: usize) -> Result<GradCam> {
    let depth = model.config().encoder.depth;
    if layer >= depth {
        return Err(invalid(format!("layer {layer} out of range for depth {depth}")));
    }
    if image.dim(0)? != 1 {
        return Err(invalid("gradcam expects a single image"));
    }
    let prompts = std::slice::from_ref(prompts);
    let trace = model.encoder.encode(&image.detach(), Some(prompts))?;
    let act = Var::from_tensor(&trace.per_block[layer].detach())?;
    let final_tokens = if layer + 1 < depth {
        model
            .encoder
            .run_blocks(act.as_tensor().clone(), layer + 1, trace.plan.as_ref())?
            .pop()
            .expect("at least one block")
    } else {
        act.as_tensor().clone()
    };
    let q = model.encode_prompts(prompts)?;
    let (logits, _) = model.decoder.decode(&final_tokens, &q)?;
    let (_, h, w, _) = act.as_tensor().dims4()?;
    let fg = logits.gt(0.0)?.to_dtype(logits.dtype())?;
    let fg_count: f32 = fg.sum_all()?.to_scalar()?;
    if fg_count == 0.0 {
        return Ok(GradCam {
            map: Grid::zeros(h, w),
            degenerate: true,
        });
    }
    let score = (logits * fg)?.sum_all()?;
    let grads = score.backward()?;
    let g = grads
        .get(act.as_tensor())
        .ok_or_else(|| invalid("no gradient reached the target layer"))?;
    // channel weights: spatially averaged gradients
    let weights = g.mean_keepdim(1)?.mean_keepdim(2)?;
    let cam = act.as_tensor().broadcast_mul(&weights)?.mean(D::Minus1)?.relu()?;
    let values: Vec<f32> = cam.flatten_all()?.to_vec1()?;
    let peak = values.iter().copied().fold(0.0f32, f32::max);
    let degenerate = peak <= 0.0;
    let data: Vec<f64> = values
        .iter()
        .map(|&v| if degenerate { 0.0 } else { (v / peak) as f64 })
        .collect();
    Ok(GradCam {
        map: Grid::from_vec(h, w, data)?,
        degenerate,
    })
}
