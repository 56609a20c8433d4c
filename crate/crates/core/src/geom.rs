//! Axis-aligned box geometry shared by the detector, the augmentations and
//! the evaluator.
//!
//! Boxes live in continuous scene coordinates where pixel `(row i, col j)`
//! covers `[j, j+1) x [i, i+1)`; a scene of width `W` spans `[0, W]` along x.

use serde::{Deserialize, Serialize};

/// A box as center plus size: `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Log-size deltas are clamped to this magnitude before exponentiation so a
/// wild regression output cannot produce an astronomically large box.
pub const DELTA_CLAMP: f64 = 4.0;

impl SceneBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// `(x0, y0, x1, y1)` corners.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn area(&self) -> f64 {
        if self.w <= 0.0 || self.h <= 0.0 {
            0.0
        } else {
            self.w * self.h
        }
    }

    /// Intersection over union; zero when either box is degenerate.
    pub fn iou(&self, other: &SceneBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = ax1.min(bx1) - ax0.max(bx0);
        let ih = ay1.min(by1) - ay0.max(by0);
        if iw <= 0.0 || ih <= 0.0 {
            return 0.0;
        }
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clip corners to the `[0, w_img] x [0, h_img]` scene rectangle.
    /// A box fully outside collapses to a degenerate sliver on the border.
    pub fn clip(&self, w_img: f64, h_img: f64) -> Self {
        let (x0, y0, x1, y1) = self.corners();
        Self::from_corners(
            x0.clamp(0.0, w_img),
            y0.clamp(0.0, h_img),
            x1.clamp(0.0, w_img),
            y1.clamp(0.0, h_img),
        )
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 1e-9 && self.h > 1e-9)
    }
}

/// Encode `target` relative to `base` as normalized center offsets plus
/// log size ratios: `(dx/bw, dy/bh, ln(tw/bw), ln(th/bh))`.
pub fn encode_box(target: &SceneBox, base: &SceneBox) -> [f64; 4] {
    [
        (target.cx - base.cx) / base.w,
        (target.cy - base.cy) / base.h,
        (target.w / base.w).ln(),
        (target.h / base.h).ln(),
    ]
}

/// Inverse of [`encode_box`] with log-size deltas clamped to
/// `[-DELTA_CLAMP, DELTA_CLAMP]`.
pub fn decode_box(base: &SceneBox, deltas: &[f64; 4]) -> SceneBox {
    SceneBox {
        cx: base.cx + deltas[0] * base.w,
        cy: base.cy + deltas[1] * base.h,
        w: base.w * deltas[2].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp(),
        h: base.h * deltas[3].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp(),
    }
}
