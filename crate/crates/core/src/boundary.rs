//! Sobel boundary maps computed from shallow encoder features.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::feature::{BoundaryMap, FeatureMap};

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Largest f64 below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// How per-channel gradient magnitudes collapse into one map per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelReduce {
    #[default]
    Mean,
    Max,
}

fn clamp_index(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Horizontal and vertical Sobel responses of every channel.
///
/// Kernels are applied as cross-correlation with replicate padding, so the
/// output has the input's shape and a linear ramp `F[i, j] = j` yields
/// `Gx = 8` everywhere.
pub fn sobel_gradients(f: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
    let [b, c, h, w] = f.shape();
    if h < 3 || w < 3 {
        return Err(invalid("sobel needs spatial dimensions of at least 3"));
    }
    let mut gx = FeatureMap::zeros(f.shape());
    let mut gy = FeatureMap::zeros(f.shape());
    for bi in 0..b {
        for ci in 0..c {
            let plane = f.plane(bi, ci);
            let at = |i: isize, j: isize| plane[clamp_index(i, h) * w + clamp_index(j, w)];
            for i in 0..h as isize {
                for j in 0..w as isize {
                    // paired differences keep constant inputs exactly zero
                    let mut sx = 0.0;
                    let mut sy = 0.0;
                    for (d, k) in [(-1, SOBEL_X[0][2]), (0, SOBEL_X[1][2]), (1, SOBEL_X[2][2])] {
                        sx += k * (at(i + d, j + 1) - at(i + d, j - 1));
                    }
                    for (d, k) in [(-1, SOBEL_Y[2][0]), (0, SOBEL_Y[2][1]), (1, SOBEL_Y[2][2])] {
                        sy += k * (at(i + 1, j + d) - at(i - 1, j + d));
                    }
                    gx.set(bi, ci, i as usize, j as usize, sx);
                    gy.set(bi, ci, i as usize, j as usize, sy);
                }
            }
        }
    }
    Ok((gx, gy))
}

/// Normalised Sobel magnitude, `mag / (max(mag) + eps)`, one map per sample.
///
/// The maximum is taken per sample; the result therefore lies in `[0, 1)`.
pub fn boundary_map(f: &FeatureMap, eps: f64, reduce: ChannelReduce) -> Result<BoundaryMap> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(invalid("eps must be positive"));
    }
    let [b, c, h, w] = f.shape();
    let (gx, gy) = sobel_gradients(f)?;
    let n = h * w;
    let mut out = Vec::with_capacity(b * n);
    for bi in 0..b {
        let mut mag = vec![0.0; n];
        for ci in 0..c {
            let px = gx.plane(bi, ci);
            let py = gy.plane(bi, ci);
            for k in 0..n {
                let m = libm::sqrt(px[k] * px[k] + py[k] * py[k]);
                match reduce {
                    ChannelReduce::Mean => mag[k] += m / c as f64,
                    ChannelReduce::Max => mag[k] = mag[k].max(m),
                }
            }
        }
        let peak = mag.iter().copied().fold(0.0, f64::max);
        // eps can vanish against a huge peak in floating point
        out.extend(mag.iter().map(|m| (m / (peak + eps)).min(BELOW_ONE)));
    }
    BoundaryMap::from_vec(b, h, w, out)
}

/// `out[b, c, i, j] = F[b, c, i, j] * M[b, 0, i, j]`.
pub fn mask_features(f: &FeatureMap, m: &BoundaryMap) -> Result<FeatureMap> {
    let [b, c, h, w] = f.shape();
    let [mb, _, mh, mw] = m.shape();
    if (b, h, w) != (mb, mh, mw) {
        return Err(Error::ShapeMismatch {
            expected: vec![b, 1, h, w],
            actual: m.shape().to_vec(),
        });
    }
    let mut out = f.clone();
    let n = h * w;
    for (k, plane) in out.data_mut().chunks_exact_mut(n).enumerate() {
        let mask = m.sample(k / c);
        for (v, mv) in plane.iter_mut().zip(mask) {
            *v *= mv;
        }
    }
    Ok(out)
}
