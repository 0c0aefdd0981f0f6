//! Center-format boxes, anchor offsets, and the grid-cell box transform.

use crate::autograd::sigmoid;
use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned box in center format. Units are grid cells unless stated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        iw * ih
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox::new(self.x * factor, self.y * factor, self.w * factor, self.h * factor)
    }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// One annotated object: box, class, and its attribute vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: u32,
    pub attributes: Vec<f64>,
}

impl GroundTruth {
    pub fn new(bbox: BBox, class_id: u32, attributes: Vec<f64>) -> Self {
        Self {
            bbox,
            class_id,
            attributes,
        }
    }
}

/// Raw regression outputs for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Offsets {
    pub ox: f64,
    pub oy: f64,
    pub ow: f64,
    pub oh: f64,
}

impl Offsets {
    pub fn new(ox: f64, oy: f64, ow: f64, oh: f64) -> Self {
        Self { ox, oy, ow, oh }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }
}

/// `x = σ(o_x) + c_x`, `y = σ(o_y) + c_y`, `w = p_w·e^{o_w}`, `h = p_h·e^{o_h}`.
pub fn decode_box(offsets: Offsets, cell: (usize, usize), anchor: (f64, f64)) -> BBox {
    BBox {
        x: sigmoid(offsets.ox) + cell.0 as f64,
        y: sigmoid(offsets.oy) + cell.1 as f64,
        w: anchor.0 * offsets.ow.exp(),
        h: anchor.1 * offsets.oh.exp(),
    }
}

/// Inverse of [`decode_box`]. The box center must lie strictly inside the cell.
pub fn encode_box(b: &BBox, cell: (usize, usize), anchor: (f64, f64)) -> Result<Offsets> {
    let fx = b.x - cell.0 as f64;
    let fy = b.y - cell.1 as f64;
    if !(fx > 0.0 && fx < 1.0 && fy > 0.0 && fy < 1.0) {
        return Err(invalid!(
            "box center ({}, {}) is not strictly inside cell {:?}",
            b.x,
            b.y,
            cell
        ));
    }
    if !(b.w > 0.0 && b.h > 0.0 && anchor.0 > 0.0 && anchor.1 > 0.0) {
        return Err(invalid!("box and anchor extents must be positive"));
    }
    Ok(Offsets {
        ox: logit(fx),
        oy: logit(fy),
        ow: (b.w / anchor.0).ln(),
        oh: (b.h / anchor.1).ln(),
    })
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
