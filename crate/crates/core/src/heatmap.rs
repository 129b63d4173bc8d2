//! Gaussian prompt heatmaps at feature-grid resolution.
//!
//! Each prompt is reduced to a centre on the feature grid, a unit-peak
//! isotropic Gaussian is rasterised around every centre, the bumps are summed
//! and the sum is divided by `max(peak, 1)` so the result stays in `[0, 1]`.
//! The heatmap is then broadcast over the channel axis and added to a
//! feature map.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::feature::FeatureMap;
use crate::prompt::PromptSet;

/// Dense row-major `h x w` grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                actual: vec![data.len()],
            });
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.w + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Pixel index grids: `X[i, j] = j` and `Y[i, j] = i`.
pub fn coord_grid(h: usize, w: usize) -> Result<(Grid, Grid)> {
    if h == 0 || w == 0 {
        return Err(invalid("coordinate grid needs positive dimensions"));
    }
    let mut xs = Grid::zeros(h, w);
    let mut ys = Grid::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            xs.set(i, j, j as f64);
            ys.set(i, j, i as f64);
        }
    }
    Ok((xs, ys))
}

/// Gaussian centre in feature-grid units (`cx` column, `cy` row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianCenter {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
}

impl GaussianCenter {
    pub fn new(cx: f64, cy: f64, sigma: f64) -> Self {
        Self { cx, cy, sigma }
    }
}

fn check_sigma(c: &GaussianCenter) -> Result<()> {
    if c.sigma.is_finite() && c.sigma > 0.0 {
        Ok(())
    } else {
        Err(invalid("gaussian sigma must be positive"))
    }
}

/// Rasterises `exp(-((j - cx)^2 + (i - cy)^2) / (2 sigma^2))` on an `h x w` grid.
pub fn gaussian_at(center: &GaussianCenter, h: usize, w: usize) -> Result<Grid> {
    check_sigma(center)?;
    let (xs, ys) = coord_grid(h, w)?;
    let denom = 2.0 * center.sigma * center.sigma;
    let data = xs
        .as_slice()
        .iter()
        .zip(ys.as_slice())
        .map(|(&x, &y)| {
            let dx = x - center.cx;
            let dy = y - center.cy;
            libm::exp(-(dx * dx + dy * dy) / denom)
        })
        .collect();
    Grid::from_vec(h, w, data)
}

/// Normalised prompt heatmap; every value lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap(Grid);

impl Heatmap {
    /// Wraps a grid after checking the `[0, 1]` invariant.
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.as_slice().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            Ok(Self(grid))
        } else {
            Err(invalid("heatmap values must lie in [0, 1]"))
        }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Grid::zeros(h, w))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Sums one Gaussian per centre, then divides by `max(raw_max, 1)`.
pub fn aggregate_heatmap(centers: &[GaussianCenter], h: usize, w: usize) -> Result<Heatmap> {
    if centers.is_empty() {
        return Err(invalid("heatmap needs at least one centre"));
    }
    let mut raw = vec![0.0; h * w];
    for c in centers {
        let g = gaussian_at(c, h, w)?;
        for (acc, v) in raw.iter_mut().zip(g.as_slice()) {
            *acc += v;
        }
    }
    let peak = raw.iter().copied().fold(0.0_f64, f64::max);
    let scale = peak.max(1.0);
    for v in &mut raw {
        *v /= scale;
    }
    Heatmap::new(Grid::from_vec(h, w, raw)?)
}

/// How Gaussian widths are chosen for each prompt type.
///
/// Boxes get `max(box_w, box_h) / box_divisor` (measured in grid units),
/// points get `min(grid_h, grid_w) / point_divisor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaPolicy {
    pub box_divisor: f64,
    pub point_divisor: f64,
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        Self {
            box_divisor: 4.0,
            point_divisor: 8.0,
        }
    }
}

/// Maps prompts from image pixels onto the feature grid.
///
/// `image_size` and `grid_size` are `(height, width)`. Centres that land off
/// the grid after scaling are clamped onto it.
pub fn prompts_to_centers(
    prompts: &PromptSet,
    image_size: (usize, usize),
    grid_size: (usize, usize),
    policy: &SigmaPolicy,
) -> Result<Vec<GaussianCenter>> {
    let (ih, iw) = image_size;
    let (gh, gw) = grid_size;
    if ih == 0 || iw == 0 || gh == 0 || gw == 0 {
        return Err(invalid("image and grid sizes must be positive"));
    }
    if !(policy.box_divisor > 0.0 && policy.point_divisor > 0.0) {
        return Err(invalid("sigma policy divisors must be positive"));
    }
    prompts.validate_nonempty(iw, ih)?;
    let sx = gw as f64 / iw as f64;
    let sy = gh as f64 / ih as f64;
    let clamp_x = |x: f64| x.clamp(0.0, (gw - 1) as f64);
    let clamp_y = |y: f64| y.clamp(0.0, (gh - 1) as f64);
    let point_sigma = gh.min(gw) as f64 / policy.point_divisor;

    let mut out = Vec::with_capacity(prompts.len());
    for p in &prompts.points {
        out.push(GaussianCenter::new(
            clamp_x(p.x * sx),
            clamp_y(p.y * sy),
            point_sigma,
        ));
    }
    for b in &prompts.boxes {
        let (cx, cy) = b.center();
        let extent = (b.width() * sx).max(b.height() * sy);
        out.push(GaussianCenter::new(
            clamp_x(cx * sx),
            clamp_y(cy * sy),
            extent / policy.box_divisor,
        ));
    }
    Ok(out)
}

/// `out[b, c, i, j] = feature[b, c, i, j] + gain * heatmap[i, j]`.
pub fn broadcast_inject(feature: &FeatureMap, heatmap: &Heatmap, gain: f64) -> Result<FeatureMap> {
    let [b, c, h, w] = feature.shape();
    if heatmap.height() != h || heatmap.width() != w {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            actual: vec![heatmap.height(), heatmap.width()],
        });
    }
    let hm = heatmap.as_slice();
    let mut out = feature.clone();
    for plane in out.data_mut().chunks_exact_mut(h * w).take(b * c) {
        for (v, m) in plane.iter_mut().zip(hm) {
            *v += gain * m;
        }
    }
    Ok(out)
}
