//! Box geometry: stride-normalized center/size encoding, IoU and greedy NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in input-image pixels, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
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
    /// Midpoint `((x1 + x2) / 2, (y1 + y2) / 2)`.
    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    /// Inclusive containment test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn clamp(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Lexicographic `(x1, y1, x2, y2)` order.
    pub fn lex_cmp(&self, other: &BBox) -> Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub class: usize,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Detection { bbox, score, class: 0 }
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.as_array()
    }
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

/// Descending score, ties by ascending box coordinates.
pub fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.bbox.lex_cmp(&b.bbox))
}

/// Regression target `(Δcx, Δcy, Δw, Δh)` relative to a grid point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaVector {
    pub dcx: f64,
    pub dcy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl DeltaVector {
    pub fn as_array(&self) -> [f64; 4] {
        [self.dcx, self.dcy, self.dw, self.dh]
    }
    pub fn from_array(v: [f64; 4]) -> Self {
        DeltaVector {
            dcx: v[0],
            dcy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

/// Center offset divided by the stride, natural log of size over stride.
pub fn encode(gt: &BBox, point: (f64, f64), stride: f64) -> Result<DeltaVector> {
    if stride <= 0.0 || !stride.is_finite() {
        return Err(Error::InvalidBox(format!("stride must be positive, got {stride}")));
    }
    let (w, h) = (gt.width(), gt.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::InvalidBox(format!("non-positive side in {gt:?}")));
    }
    let (cx, cy) = gt.center();
    Ok(DeltaVector {
        dcx: (cx - point.0) / stride,
        dcy: (cy - point.1) / stride,
        dw: (w / stride).ln(),
        dh: (h / stride).ln(),
    })
}

pub fn decode(delta: &DeltaVector, point: (f64, f64), stride: f64) -> BBox {
    let cx = point.0 + stride * delta.dcx;
    let cy = point.1 + stride * delta.dcy;
    BBox::from_center(cx, cy, stride * delta.dw.exp(), stride * delta.dh.exp())
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy suppression: visit in [`score_order`], keep a detection iff its IoU
/// with every already-kept detection is at most `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(score_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}
