//! Axis-aligned boxes in center form, with corner-form conversion and overlap
//! measures shared by the loss functions and the evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateFrame {
    #[default]
    AbsolutePx,
    Normalized01,
}

/// Center-form box `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
    #[serde(default)]
    pub frame: CoordinateFrame,
}

impl<T: Real> BoundingBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Self {
        Self { cx, cy, w, h, frame: CoordinateFrame::AbsolutePx }
    }

    pub fn from_corners(x1: T, y1: T, x2: T, y2: T) -> Self {
        let two = T::lit(2.0);
        Self::new((x1 + x2) / two, (y1 + y2) / two, x2 - x1, y2 - y1)
    }

    /// From the `[x, y, w, h]` top-left layout used by COCO-style annotations.
    pub fn from_xywh(x: T, y: T, w: T, h: T) -> Self {
        let two = T::lit(2.0);
        Self::new(x + w / two, y + h / two, w, h)
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [T; 4] {
        let two = T::lit(2.0);
        let (hw, hh) = (self.w / two, self.h / two);
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    pub fn to_xywh(&self) -> [T; 4] {
        let [x1, y1, _, _] = self.corners();
        [x1, y1, self.w, self.h]
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        let ok = self.w > T::zero() && self.h > T::zero() && self.cx.is_finite() && self.cy.is_finite();
        match self.frame {
            CoordinateFrame::AbsolutePx => ok,
            CoordinateFrame::Normalized01 => {
                let unit = |v: T| v >= T::zero() && v <= T::one();
                ok && unit(self.cx) && unit(self.cy) && unit(self.w) && unit(self.h)
            }
        }
    }

    /// True when the box lies inside a `width × height` image (absolute frame).
    pub fn inside(&self, width: T, height: T) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        let eps = T::lit(1e-6);
        x1 >= -eps && y1 >= -eps && x2 <= width + eps && y2 <= height + eps
    }

    pub fn normalized(&self, width: T, height: T) -> Self {
        Self {
            cx: self.cx / width,
            cy: self.cy / height,
            w: self.w / width,
            h: self.h / height,
            frame: CoordinateFrame::Normalized01,
        }
    }

    pub fn denormalized(&self, width: T, height: T) -> Self {
        Self {
            cx: self.cx * width,
            cy: self.cy * height,
            w: self.w * width,
            h: self.h * height,
            frame: CoordinateFrame::AbsolutePx,
        }
    }

    /// Clip to `[0, width] × [0, height]`.
    pub fn clamped(&self, width: T, height: T) -> Self {
        let [x1, y1, x2, y2] = self.corners();
        let c = |v: T, hi: T| v.max(T::zero()).min(hi);
        let mut b = Self::from_corners(c(x1, width), c(y1, height), c(x2, width), c(y2, height));
        b.frame = self.frame;
        b
    }

    /// Scale then translate: `x ↦ x * sx + dx`.
    pub fn affine(&self, sx: T, sy: T, dx: T, dy: T) -> Self {
        Self {
            cx: self.cx * sx + dx,
            cy: self.cy * sy + dy,
            w: self.w * sx.abs(),
            h: self.h * sy.abs(),
            frame: self.frame,
        }
    }

    pub fn cast<U: Real>(&self) -> BoundingBox<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        BoundingBox { cx: c(self.cx), cy: c(self.cy), w: c(self.w), h: c(self.h), frame: self.frame }
    }

    pub fn contains_point(&self, x: T, y: T) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x >= x1 && x <= x2 && y >= y1 && y <= y2
    }
}

fn intersection<T: Real>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(T::zero());
    let ih = (ay2.min(by2) - ay1.max(by1)).max(T::zero());
    iw * ih
}

// Area from the corners, so that a box intersected with itself gives the same
// number bit for bit.
fn corner_area<T: Real>(b: &BoundingBox<T>) -> T {
    let [x1, y1, x2, y2] = b.corners();
    (x2 - x1).max(T::zero()) * (y2 - y1).max(T::zero())
}

/// Intersection over union. Returns 0 when the union is empty.
pub fn iou<T: Real>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    let inter = intersection(a, b);
    let union = corner_area(a) + corner_area(b) - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one()).max(T::zero())
}

/// Generalized IoU: `IoU - (C - U) / C` with `C` the smallest enclosing box.
pub fn giou<T: Real>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    let inter = intersection(a, b);
    let union = corner_area(a) + corner_area(b) - inter;
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let enclose = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    if union <= T::zero() || enclose <= T::zero() {
        return T::zero();
    }
    // the slack is clamped so rounding never lifts GIoU above IoU
    iou(a, b) - (enclose - union).max(T::zero()) / enclose
}
