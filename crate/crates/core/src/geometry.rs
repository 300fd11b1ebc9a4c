//! Normalized boxes and overlap measures.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized center form. Serialized as `[cx, cy, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.cx, b.cy, b.w, b.h]
    }
}

/// Corner form `(x0, y0, x1, y1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Corners {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn intersect(&self, o: &Corners) -> Corners {
        Corners {
            x0: self.x0.max(o.x0),
            y0: self.y0.max(o.y0),
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
        }
    }

    pub fn to_box(&self) -> BBox {
        BBox::new(
            (self.x0 + self.x1) / 2.0,
            (self.y0 + self.y1) / 2.0,
            self.x1 - self.x0,
            self.y1 - self.y0,
        )
    }
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Corners { x0, y0, x1, y1 }.to_box()
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.cx) && unit(self.cy) && self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0
    }

    pub fn corners(&self) -> Corners {
        Corners {
            x0: self.cx - self.w / 2.0,
            y0: self.cy - self.h / 2.0,
            x1: self.cx + self.w / 2.0,
            y1: self.cy + self.h / 2.0,
        }
    }

    /// Corner form clipped to the unit square.
    pub fn clipped_corners(&self) -> Corners {
        let c = self.corners();
        Corners {
            x0: c.x0.clamp(0.0, 1.0),
            y0: c.y0.clamp(0.0, 1.0),
            x1: c.x1.clamp(0.0, 1.0),
            y1: c.y1.clamp(0.0, 1.0),
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// True when `self` lies entirely within `outer`.
    pub fn inside(&self, outer: &BBox) -> bool {
        let a = self.corners();
        let b = outer.corners();
        a.x0 >= b.x0 && a.y0 >= b.y0 && a.x1 <= b.x1 && a.y1 <= b.y1
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = ca.intersect(&cb).area();
    let union = ca.area() + cb.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered by
/// the union.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = ca.intersect(&cb).area();
    let union = ca.area() + cb.area() - inter;
    let enclose = Corners {
        x0: ca.x0.min(cb.x0),
        y0: ca.y0.min(cb.y0),
        x1: ca.x1.max(cb.x1),
        y1: ca.y1.max(cb.y1),
    }
    .area();
    if union <= 0.0 || enclose <= 0.0 {
        return 0.0;
    }
    inter / union - (enclose - union) / enclose
}
