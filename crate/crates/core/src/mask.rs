//! Binary masks and prompt generation from masks.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::prompt::{BoxXYXY, Point2D};

/// Row-major `h x w` binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                actual: vec![data.len()],
            });
        }
        Ok(Self { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j));
            }
        }
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.w + j] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }

    pub fn complement(&self) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }
}

/// Tight half-open bounding box of the foreground (`x` = column, `y` = row).
pub fn minimal_box(mask: &BinaryMask) -> Result<BoxXYXY> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for i in 0..mask.h {
        for j in 0..mask.w {
            if mask.get(i, j) {
                r0 = r0.min(i);
                r1 = r1.max(i);
                c0 = c0.min(j);
                c1 = c1.max(j);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(invalid("minimal box of an empty mask"));
    }
    Ok(BoxXYXY::new(c0 as f64, r0 as f64, (c1 + 1) as f64, (r1 + 1) as f64))
}

/// Uniformly random foreground pixel, reproducible for a given seed.
pub fn sample_point(mask: &BinaryMask, seed: u64) -> Result<Point2D> {
    let fg: Vec<usize> = mask
        .data
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(k, _)| k)
        .collect();
    if fg.is_empty() {
        return Err(invalid("cannot sample a point from an empty mask"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = fg[rng.random_range(0..fg.len())];
    Ok(Point2D::new((k % mask.w) as f64, (k / mask.w) as f64))
}
