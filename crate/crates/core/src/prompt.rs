//! User prompts in image pixel coordinates.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// A click prompt. `x` is the pixel column, `y` the pixel row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let ok = self.x.is_finite()
            && self.y.is_finite()
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x < width as f64
            && self.y < height as f64;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!(
                "point ({}, {}) outside {}x{} image",
                self.x, self.y, width, height
            )))
        }
    }
}

/// Axis-aligned box, half-open: covers `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxXYXY {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxXYXY {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite());
        let ok = finite
            && self.x0 < self.x1
            && self.y0 < self.y1
            && self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x1 <= width as f64
            && self.y1 <= height as f64;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!(
                "box ({}, {}, {}, {}) invalid for {}x{} image",
                self.x0, self.y0, self.x1, self.y1, width, height
            )))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptSet {
    pub points: Vec<Point2D>,
    pub boxes: Vec<BoxXYXY>,
}

impl PromptSet {
    pub fn from_box(b: BoxXYXY) -> Self {
        Self {
            points: Vec::new(),
            boxes: alloc::vec![b],
        }
    }

    pub fn from_point(p: Point2D) -> Self {
        Self {
            points: alloc::vec![p],
            boxes: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.boxes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len() + self.boxes.len()
    }

    /// Checks every prompt against the image bounds.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for p in &self.points {
            p.validate(width, height)?;
        }
        for b in &self.boxes {
            b.validate(width, height)?;
        }
        Ok(())
    }

    /// Like [`PromptSet::validate`], and additionally rejects an empty set.
    pub fn validate_nonempty(&self, width: usize, height: usize) -> Result<()> {
        if self.is_empty() {
            return Err(invalid("prompt set is empty"));
        }
        self.validate(width, height)
    }
}
