use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

/// Rank-4 `B x C x H x W` feature tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid("feature map dimensions must be positive"));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature map contains non-finite values"));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [b, c, h, w] = shape;
        let mut data = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        data.push(f(bi, ci, i, j));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn index(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        let [_, cc, h, w] = self.shape;
        ((b * cc + c) * h + i) * w + j
    }

    pub fn get(&self, b: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(b, c, i, j)]
    }

    pub fn set(&mut self, b: usize, c: usize, i: usize, j: usize, v: f64) {
        let k = self.index(b, c, i, j);
        self.data[k] = v;
    }

    /// The `H x W` plane of sample `b`, channel `c`.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let [_, _, h, w] = self.shape;
        let start = self.index(b, c, 0, 0);
        &self.data[start..start + h * w]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `B x 1 x H x W` boundary map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMap {
    batch: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl BoundaryMap {
    pub fn from_vec(batch: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * h * w {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, 1, h, w],
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
            return Err(invalid("boundary map values must lie in [0, 1]"));
        }
        Ok(Self { batch, h, w, data })
    }

    pub fn filled(batch: usize, h: usize, w: usize, value: f64) -> Result<Self> {
        Self::from_vec(batch, h, w, vec![value; batch * h * w])
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, 1, self.h, self.w]
    }

    pub fn get(&self, b: usize, i: usize, j: usize) -> f64 {
        self.data[(b * self.h + i) * self.w + j]
    }

    /// The `H x W` map of sample `b`.
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}
