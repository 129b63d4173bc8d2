//! Overlap metrics for binary segmentation.

use alloc::vec;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

fn check(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch {
            expected: vec![gt.height(), gt.width()],
            actual: vec![pred.height(), pred.width()],
        });
    }
    Ok(())
}

fn counts(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    (inter, p, g)
}

fn iou_from_counts(inter: usize, p: usize, g: usize) -> f64 {
    let union = p + g - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `2|P ∩ G| / (|P| + |G|)`, defined as 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check(pred, gt)?;
    let (inter, p, g) = counts(pred, gt);
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Foreground IoU, 1 when both masks are empty.
pub fn iou_foreground(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check(pred, gt)?;
    let (inter, p, g) = counts(pred, gt);
    Ok(iou_from_counts(inter, p, g))
}

/// Mean of foreground and background IoU.
pub fn miou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check(pred, gt)?;
    let n = pred.as_slice().len();
    let (inter, p, g) = counts(pred, gt);
    let fg = iou_from_counts(inter, p, g);
    // background: |~P ∩ ~G| = n - |P ∪ G|
    let union = p + g - inter;
    let bg = iou_from_counts(n - union, n - p, n - g);
    Ok((fg + bg) / 2.0)
}
