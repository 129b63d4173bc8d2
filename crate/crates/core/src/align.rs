//! Masked Pearson alignment between shallow and deep features.
//!
//! Both feature maps are multiplied by the boundary map, and for each sample
//! and channel the Pearson correlation is taken over the boundary support
//! `{(i, j) : M[b, i, j] > threshold}`. The loss is the mean of `1 - r` over
//! all non-degenerate `(b, c)` pairs. Cells outside the support never enter
//! the sums, so they receive exactly zero gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::feature::{BoundaryMap, FeatureMap};

/// Variance floor below which a channel is treated as flat and skipped.
pub const MIN_VARIANCE: f64 = 1e-12;

/// Default support threshold on the boundary map.
pub const DEFAULT_SUPPORT_THRESHOLD: f64 = 0.1;

/// Per-`(b, c)` correlations; `None` marks an excluded channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlations {
    pub batch: usize,
    pub channels: usize,
    pub values: Vec<Option<f64>>,
}

impl Correlations {
    pub fn get(&self, b: usize, c: usize) -> Option<f64> {
        self.values[b * self.channels + c]
    }

    pub fn used(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// Scalar summary of one alignment evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentReport {
    pub loss: f64,
    pub channels_used: usize,
    /// Filled in by whoever evaluated the quality gate; `false` by default.
    pub gate_passed: bool,
    /// Mean over samples of `|support| / (H * W)`.
    pub support_fraction: f64,
}

/// Loss, per-channel correlations and gradients with respect to both inputs.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub report: AlignmentReport,
    pub correlations: Correlations,
    pub grad_deep: FeatureMap,
    pub grad_shallow: FeatureMap,
}

fn check_shapes(fs: &FeatureMap, fd: &FeatureMap, m: &BoundaryMap, threshold: f64) -> Result<()> {
    if fs.shape() != fd.shape() {
        return Err(Error::ShapeMismatch {
            expected: fs.shape().to_vec(),
            actual: fd.shape().to_vec(),
        });
    }
    let [b, _, h, w] = fs.shape();
    if m.shape() != [b, 1, h, w] {
        return Err(Error::ShapeMismatch {
            expected: vec![b, 1, h, w],
            actual: m.shape().to_vec(),
        });
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(invalid("support threshold must lie in [0, 1)"));
    }
    Ok(())
}

struct ChannelStats {
    r: f64,
    // centred masked values over the support, in support order
    xc: Vec<f64>,
    yc: Vec<f64>,
    sxx: f64,
    syy: f64,
}

fn channel_stats(xs: &[f64], ys: &[f64]) -> Option<ChannelStats> {
    let n = xs.len();
    if n == 0 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let xc: Vec<f64> = xs.iter().map(|x| x - mx).collect();
    let yc: Vec<f64> = ys.iter().map(|y| y - my).collect();
    let sxx: f64 = xc.iter().map(|v| v * v).sum();
    let syy: f64 = yc.iter().map(|v| v * v).sum();
    if sxx / (n as f64) < MIN_VARIANCE || syy / (n as f64) < MIN_VARIANCE {
        return None;
    }
    let sxy: f64 = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
    let r = (sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0);
    Some(ChannelStats { r, xc, yc, sxx, syy })
}

fn support(m: &BoundaryMap, b: usize, threshold: f64) -> Vec<usize> {
    m.sample(b)
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(k, _)| k)
        .collect()
}

fn gather(plane: &[f64], mask: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&k| plane[k] * mask[k]).collect()
}

/// Pearson correlation of the masked features over the boundary support.
pub fn masked_pearson(
    fs: &FeatureMap,
    fd: &FeatureMap,
    m: &BoundaryMap,
    support_threshold: f64,
) -> Result<Correlations> {
    check_shapes(fs, fd, m, support_threshold)?;
    let [b, c, _, _] = fs.shape();
    let mut values = Vec::with_capacity(b * c);
    for bi in 0..b {
        let idx = support(m, bi, support_threshold);
        let mask = m.sample(bi);
        for ci in 0..c {
            let xs = gather(fs.plane(bi, ci), mask, &idx);
            let ys = gather(fd.plane(bi, ci), mask, &idx);
            values.push(channel_stats(&xs, &ys).map(|s| s.r));
        }
    }
    Ok(Correlations {
        batch: b,
        channels: c,
        values,
    })
}

/// Alignment loss `mean(1 - r)` with analytic gradients.
///
/// With centred masked values `x~`, `y~` over the support and
/// `r = Sxy / sqrt(Sxx Syy)`, the gradient of `r` with respect to a masked
/// deep value is `x~_k / sqrt(Sxx Syy) - r y~_k / Syy`; the chain rule through
/// the mask multiplies by `M_k`. The shallow gradient is symmetric. When
/// every channel is excluded the loss is `0` and both gradients vanish.
pub fn alignment_loss(
    fs: &FeatureMap,
    fd: &FeatureMap,
    m: &BoundaryMap,
    support_threshold: f64,
) -> Result<Alignment> {
    check_shapes(fs, fd, m, support_threshold)?;
    let [b, c, h, w] = fs.shape();
    let mut grad_deep = FeatureMap::zeros(fs.shape());
    let mut grad_shallow = FeatureMap::zeros(fs.shape());
    let mut values = Vec::with_capacity(b * c);
    let mut per_channel: Vec<(usize, usize, ChannelStats)> = Vec::new();
    let mut support_total = 0usize;
    let mut supports = Vec::with_capacity(b);

    for bi in 0..b {
        let idx = support(m, bi, support_threshold);
        support_total += idx.len();
        let mask = m.sample(bi);
        for ci in 0..c {
            let xs = gather(fs.plane(bi, ci), mask, &idx);
            let ys = gather(fd.plane(bi, ci), mask, &idx);
            match channel_stats(&xs, &ys) {
                Some(s) => {
                    values.push(Some(s.r));
                    per_channel.push((bi, ci, s));
                }
                None => values.push(None),
            }
        }
        supports.push(idx);
    }

    let used = per_channel.len();
    let loss = if used == 0 {
        0.0
    } else {
        per_channel.iter().map(|(_, _, s)| 1.0 - s.r).sum::<f64>() / used as f64
    };

    if used > 0 {
        let scale = -1.0 / used as f64;
        for (bi, ci, s) in &per_channel {
            let idx = &supports[*bi];
            let mask = m.sample(*bi);
            let norm = libm::sqrt(s.sxx * s.syy);
            for (n, &k) in idx.iter().enumerate() {
                let (i, j) = (k / w, k % w);
                let dr_dy = s.xc[n] / norm - s.r * s.yc[n] / s.syy;
                let dr_dx = s.yc[n] / norm - s.r * s.xc[n] / s.sxx;
                grad_deep.set(*bi, *ci, i, j, scale * dr_dy * mask[k]);
                grad_shallow.set(*bi, *ci, i, j, scale * dr_dx * mask[k]);
            }
        }
    }

    Ok(Alignment {
        report: AlignmentReport {
            loss,
            channels_used: used,
            gate_passed: false,
            support_fraction: support_total as f64 / (b * h * w) as f64,
        },
        correlations: Correlations {
            batch: b,
            channels: c,
            values,
        },
        grad_deep,
        grad_shallow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(shape: [usize; 4], seed: u64) -> FeatureMap {
        // small LCG; values only need to be non-degenerate
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        FeatureMap::from_fn(shape, |_, _, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn full_mask(shape: [usize; 4]) -> BoundaryMap {
        BoundaryMap::filled(shape[0], shape[2], shape[3], 0.5).unwrap()
    }

    #[test]
    fn self_and_anti_correlation() {
        let shape = [2, 3, 5, 5];
        let f = features(shape, 1);
        let m = full_mask(shape);
        let r = masked_pearson(&f, &f, &m, 0.1).unwrap();
        assert!(r.values.iter().all(|v| (v.unwrap() - 1.0).abs() < 1e-12));
        let neg = f.map(|v| 3.0 - v);
        let r = masked_pearson(&f, &neg, &m, 0.1).unwrap();
        assert!(r.values.iter().all(|v| (v.unwrap() + 1.0).abs() < 1e-12));
        let aff = f.map(|v| 2.0 * v + 3.0);
        let r = masked_pearson(&f, &aff, &m, 0.1).unwrap();
        assert!(r.values.iter().all(|v| (v.unwrap() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn loss_extremes_and_half() {
        let shape = [1, 4, 6, 6];
        let f = features(shape, 2);
        let m = full_mask(shape);
        assert!(alignment_loss(&f, &f, &m, 0.1).unwrap().report.loss.abs() < 1e-12);
        let neg = f.map(|v| -v);
        assert!((alignment_loss(&f, &neg, &m, 0.1).unwrap().report.loss - 2.0).abs() < 1e-12);
        let half = FeatureMap::from_fn(shape, |b, c, i, j| {
            let v = f.get(b, c, i, j);
            if c < 2 { v } else { -v }
        });
        let a = alignment_loss(&f, &half, &m, 0.1).unwrap();
        assert!((a.report.loss - 1.0).abs() < 1e-12);
        assert_eq!(a.report.channels_used, 4);
    }

    #[test]
    fn empty_support_excludes_everything() {
        let shape = [2, 2, 4, 4];
        let f = features(shape, 3);
        let m = BoundaryMap::filled(2, 4, 4, 0.0).unwrap();
        let a = alignment_loss(&f, &f.map(|v| -v), &m, 0.1).unwrap();
        assert_eq!(a.report.loss, 0.0);
        assert_eq!(a.report.channels_used, 0);
        assert_eq!(a.report.support_fraction, 0.0);
        assert!(a.grad_deep.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn flat_channel_excluded() {
        let shape = [1, 2, 4, 4];
        let f = FeatureMap::from_fn(shape, |_, c, i, j| if c == 0 { 1.0 } else { (i * 4 + j) as f64 });
        let m = full_mask(shape);
        let r = masked_pearson(&f, &f, &m, 0.1).unwrap();
        assert_eq!(r.get(0, 0), None);
        assert!((r.get(0, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let a = FeatureMap::zeros([1, 2, 4, 4]);
        let b = FeatureMap::zeros([1, 3, 4, 4]);
        let m = BoundaryMap::filled(1, 4, 4, 1.0).unwrap();
        assert!(alignment_loss(&a, &b, &m, 0.1).is_err());
        assert!(alignment_loss(&a, &a, &m, 1.0).is_err());
        let m2 = BoundaryMap::filled(1, 4, 5, 1.0).unwrap();
        assert!(masked_pearson(&a, &a, &m2, 0.1).is_err());
    }
}
