//! Axis-aligned boxes, IoU and generalized IoU.

use serde::{Deserialize, Serialize};

/// Center-format box `(cx, cy, w, h)`, normalized to image size in model space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_xyxy(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_xyxy(self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_degenerate(self) -> bool {
        !(self.w > 0.0 && self.h > 0.0)
    }

    /// Pixel xyxy box of a `width × height` image → normalized center format.
    pub fn normalize_xyxy(xyxy: [f64; 4], width: f64, height: f64) -> Self {
        Self::from_xyxy(
            xyxy[0] / width,
            xyxy[1] / height,
            xyxy[2] / width,
            xyxy[3] / height,
        )
    }

    pub fn flipped_horizontally(self) -> Self {
        Self {
            cx: 1.0 - self.cx,
            ..self
        }
    }

    pub fn l1(self, other: Self) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

fn xyxy_area(p: [f64; 4]) -> f64 {
    (p[2] - p[0]).max(0.0) * (p[3] - p[1]).max(0.0)
}

fn intersection(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// Intersection over union; zero-area boxes score 0 against anything.
pub fn iou(a: BBox, b: BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let (pa, pb) = (a.to_xyxy(), b.to_xyxy());
    let inter = intersection(pa, pb);
    let union = xyxy_area(pa) + xyxy_area(pb) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − |C \ (A ∪ B)| / |C|` with `C` the enclosing box.
pub fn giou(a: BBox, b: BBox) -> f64 {
    let (pa, pb) = (a.to_xyxy(), b.to_xyxy());
    let inter = if a.is_degenerate() || b.is_degenerate() {
        0.0
    } else {
        intersection(pa, pb)
    };
    let union = xyxy_area(pa) + xyxy_area(pb) - inter;
    let hull = (pa[2].max(pb[2]) - pa[0].min(pb[0])).max(0.0)
        * (pa[3].max(pb[3]) - pa[1].min(pb[1])).max(0.0);
    if hull <= 0.0 {
        return 0.0;
    }
    iou(a, b) - (hull - union) / hull
}
