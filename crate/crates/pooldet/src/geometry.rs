//! Axis-aligned box arithmetic used by every other module.
//!
//! All coordinates are real-valued image pixels; nothing in here quantizes,
//! so shrink factors may produce fractional corners.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in image coordinates, stored as corner pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// A point in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

impl BBox {
    /// Builds a box from its corner pair, normalizing a flipped corner order.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    /// Builds a box from `[x, y, width, height]` (corner + size convention).
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// True iff the point lies inside the box; boundaries count as inside.
    pub fn contains(&self, p: Point) -> bool {
        self.x1 <= p.x && p.x <= self.x2 && self.y1 <= p.y && p.y <= self.y2
    }

    /// Euclidean distance from `p` to the box center.
    pub fn center_distance(&self, p: Point) -> f64 {
        self.center().distance(p)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union. Degenerate (zero-area) boxes yield 0 against
    /// everything, including themselves, so the ratio is never 0/0.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Scales width and height by `s` about the box center.
    ///
    /// `s` must lie in `(0, 1]`; the result keeps the center and aspect ratio.
    pub fn shrink(&self, s: f64) -> Result<BBox> {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "shrink factor must be in (0, 1], got {s}"
            )));
        }
        let c = self.center();
        let hw = 0.5 * s * self.width();
        let hh = 0.5 * s * self.height();
        Ok(BBox {
            x1: c.x - hw,
            y1: c.y - hh,
            x2: c.x + hw,
            y2: c.y + hh,
        })
    }

    /// Clips the box to `[0, w] x [0, h]`.
    pub fn clip(&self, w: f64, h: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }
}

/// Free-function forms mirroring the method API; some call sites read better this way.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

pub fn shrink_box(b: &BBox, s: f64) -> Result<BBox> {
    b.shrink(s)
}
