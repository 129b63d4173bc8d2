//! Boundary-map quality gate.
//!
//! A map passes when the mean activation inside the target region exceeds
//! both `tau` times the mean outside it and the absolute floor `delta`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::feature::BoundaryMap;
use crate::prompt::BoxXYXY;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateThresholds {
    pub tau: f64,
    pub delta: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        Self {
            tau: 1.5,
            delta: 0.1,
        }
    }
}

impl GateThresholds {
    pub fn new(tau: f64, delta: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(invalid("tau must be positive"));
        }
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(invalid("delta must be non-negative"));
        }
        Ok(Self { tau, delta })
    }

    /// The bare comparison on precomputed means.
    pub fn passes(&self, mean_in: f64, mean_out: f64) -> bool {
        mean_in > self.tau * mean_out && mean_in > self.delta
    }
}

/// Set of grid cells treated as "inside the box".
#[derive(Debug, Clone, PartialEq)]
pub struct GridRegion {
    h: usize,
    w: usize,
    cells: Vec<bool>,
}

impl GridRegion {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            cells: vec![false; h * w],
        }
    }

    /// Union of the grid cells overlapped by any of `boxes`.
    ///
    /// `image_size` and `grid_size` are `(height, width)`; a cell is inside
    /// when the scaled box covers a positive area of it.
    pub fn from_boxes(boxes: &[BoxXYXY], image_size: (usize, usize), grid_size: (usize, usize)) -> Self {
        let (ih, iw) = image_size;
        let (gh, gw) = grid_size;
        let mut region = Self::empty(gh, gw);
        let sx = gw as f64 / iw as f64;
        let sy = gh as f64 / ih as f64;
        for b in boxes {
            let j0 = libm::floor(b.x0 * sx).max(0.0) as usize;
            let i0 = libm::floor(b.y0 * sy).max(0.0) as usize;
            let j1 = (libm::ceil(b.x1 * sx).max(0.0) as usize).min(gw);
            let i1 = (libm::ceil(b.y1 * sy).max(0.0) as usize).min(gh);
            if b.x1 <= b.x0 || b.y1 <= b.y0 {
                continue;
            }
            for i in i0..i1 {
                for j in j0..j1 {
                    region.cells[i * gw + j] = true;
                }
            }
        }
        region
    }

    /// Cells `rows x cols` (half-open ranges) directly in grid coordinates.
    pub fn from_cells(h: usize, w: usize, rows: core::ops::Range<usize>, cols: core::ops::Range<usize>) -> Self {
        let mut region = Self::empty(h, w);
        for i in rows.start.min(h)..rows.end.min(h) {
            for j in cols.start.min(w)..cols.end.min(w) {
                region.cells[i * w + j] = true;
            }
        }
        region
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.w + j]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub passed: bool,
    pub mean_in: f64,
    pub mean_out: f64,
    /// No cell fell inside the region; the gate fails.
    pub degenerate: bool,
}

/// Evaluates the gate for every sample of `m`.
///
/// When the region covers the whole grid the outside mean is defined as 0,
/// so only the `delta` test remains.
pub fn quality_gate(m: &BoundaryMap, region: &GridRegion, thresholds: &GateThresholds) -> Result<Vec<GateDecision>> {
    let [b, _, h, w] = m.shape();
    if region.size() != (h, w) {
        return Err(crate::error::Error::ShapeMismatch {
            expected: vec![h, w],
            actual: vec![region.h, region.w],
        });
    }
    let inside = region.count();
    let outside = h * w - inside;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        if inside == 0 {
            out.push(GateDecision {
                passed: false,
                mean_in: 0.0,
                mean_out: 0.0,
                degenerate: true,
            });
            continue;
        }
        let (mut sum_in, mut sum_out) = (0.0, 0.0);
        for (k, v) in m.sample(bi).iter().enumerate() {
            if region.cells[k] {
                sum_in += v;
            } else {
                sum_out += v;
            }
        }
        let mean_in = sum_in / inside as f64;
        let mean_out = if outside == 0 { 0.0 } else { sum_out / outside as f64 };
        out.push(GateDecision {
            passed: thresholds.passes(mean_in, mean_out),
            mean_in,
            mean_out,
            degenerate: false,
        });
    }
    Ok(out)
}
