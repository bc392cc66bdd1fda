use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, corners `(x1, y1)` and `(x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Ground-truth object: a box and its 0-based class id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: Bbox,
    pub class_id: usize,
}

/// Largest log-scale delta accepted when decoding, so that untrained
/// regressors cannot overflow `exp`.
pub const MAX_LOG_DELTA: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

impl Bbox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::Domain(format!(
                "box ({}, {}, {}, {}) has non-positive area",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection_area(&self, other: &Bbox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Restricted to `[0, width] × [0, height]`; may come out empty.
    pub fn clip(&self, width: f64, height: f64) -> Bbox {
        Bbox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Regression target of `gt` relative to `anchor`:
/// `(Δcx / w_a, Δcy / h_a, ln(w_g / w_a), ln(h_g / h_a))`.
pub fn encode_box(anchor: &Bbox, gt: &Bbox) -> Result<[f64; 4]> {
    gt.validate()?;
    anchor.validate()?;
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok([
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ])
}

/// Exact inverse of [`encode_box`].
pub fn decode_box(anchor: &Bbox, deltas: &[f64; 4]) -> Bbox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Bbox::from_center(acx + deltas[0] * aw, acy + deltas[1] * ah, aw * deltas[2].exp(), ah * deltas[3].exp())
}

/// [`decode_box`] with the log-size deltas capped at [`MAX_LOG_DELTA`], for raw network outputs.
pub fn decode_box_clamped(anchor: &Bbox, deltas: &[f64; 4]) -> Bbox {
    let d = [deltas[0], deltas[1], deltas[2].min(MAX_LOG_DELTA), deltas[3].min(MAX_LOG_DELTA)];
    decode_box(anchor, &d)
}
