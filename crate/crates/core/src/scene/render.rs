//! Anti-aliased rasterization of the shape classes.

use std::f64::consts::PI;

use rand::Rng;

use super::classes::ShapeKind;
use crate::boxes::BBox;

/// Subsamples per pixel along each axis.
pub const SUPERSAMPLE: usize = 4;

/// Shape geometry in its own coordinates: an inside test and the exact
/// bounding rectangle `(u0, u1, v0, v1)` of the region it accepts.
struct Geometry {
    bounds: (f64, f64, f64, f64),
    inside: Box<dyn Fn(f64, f64) -> bool + Send + Sync>,
}

fn polygon(vertices: Vec<(f64, f64)>) -> Geometry {
    let bounds = poly_bounds(&vertices);
    Geometry {
        bounds,
        inside: Box::new(move |u, v| in_polygon(&vertices, u, v)),
    }
}

fn poly_bounds(vertices: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    vertices.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(u, v)| (a.min(u), b.max(u), c.min(v), d.max(v)),
    )
}

/// Even-odd rule.
fn in_polygon(vertices: &[(f64, f64)], u: f64, v: f64) -> bool {
    let mut inside = false;
    let n = vertices.len();
    for i in 0..n {
        let (ui, vi) = vertices[i];
        let (uj, vj) = vertices[(i + n - 1) % n];
        if (vi > v) != (vj > v) && u < (uj - ui) * (v - vi) / (vj - vi) + ui {
            inside = !inside;
        }
    }
    inside
}

fn radial(points: usize, outer: f64, inner: f64) -> Vec<(f64, f64)> {
    (0..2 * points)
        .map(|i| {
            let r = if i % 2 == 0 { outer } else { inner };
            let a = -PI / 2.0 + PI * i as f64 / points as f64;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn scaled_about(vertices: &[(f64, f64)], c: (f64, f64), s: f64) -> Vec<(f64, f64)> {
    vertices
        .iter()
        .map(|&(u, v)| (c.0 + s * (u - c.0), c.1 + s * (v - c.1)))
        .collect()
}

fn geometry(shape: ShapeKind) -> Geometry {
    use ShapeKind::*;
    let unit = (-1.0, 1.0, -1.0, 1.0);
    match shape {
        Circle | Ellipse => Geometry {
            bounds: unit,
            inside: Box::new(|u, v| u * u + v * v <= 1.0),
        },
        Ring | OvalRing => Geometry {
            bounds: unit,
            inside: Box::new(|u, v| {
                let r = u * u + v * v;
                (0.3025..=1.0).contains(&r)
            }),
        },
        Sun => polygon(radial(12, 1.0, 0.74)),
        Crescent => {
            // Disc minus an offset disc; the horns end where the circles meet.
            let (off, r2) = (0.45, 0.85f64.powi(2));
            let tip = (1.0 - r2 + off * off) / (2.0 * off);
            Geometry {
                bounds: (-1.0, tip, -1.0, 1.0),
                inside: Box::new(move |u, v| u * u + v * v <= 1.0 && (u - off).powi(2) + v * v > r2),
            }
        }
        Square | Bar => Geometry {
            bounds: unit,
            inside: Box::new(|_, _| true),
        },
        Frame => Geometry {
            bounds: unit,
            inside: Box::new(|u: f64, v: f64| u.abs() >= 0.6 || v.abs() >= 0.6),
        },
        HollowBar => Geometry {
            bounds: unit,
            inside: Box::new(|u: f64, v: f64| u.abs() >= 0.82 || v.abs() >= 0.5),
        },
        Triangle => polygon(vec![(0.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]),
        HollowTriangle => {
            let outer = vec![(0.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
            let inner = scaled_about(&outer, (0.0, 1.0 / 3.0), 0.45);
            Geometry {
                bounds: poly_bounds(&outer),
                inside: Box::new(move |u, v| in_polygon(&outer, u, v) && !in_polygon(&inner, u, v)),
            }
        }
        Star => polygon(radial(5, 1.0, 0.42)),
        Cross => Geometry {
            bounds: unit,
            inside: Box::new(|u: f64, v: f64| v.abs() <= 0.3 || u.abs() <= 0.3 / 1.7),
        },
        Diamond => Geometry {
            bounds: unit,
            inside: Box::new(|u: f64, v: f64| u.abs() + v.abs() <= 1.0),
        },
        Pentagon => polygon((0..5).map(|i| {
            let a = -PI / 2.0 + 2.0 * PI * i as f64 / 5.0;
            (a.cos(), a.sin())
        })
        .collect()),
    }
}

/// One shape placed in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub shape: ShapeKind,
    /// Pixel-space box, center format.
    pub bbox: BBox,
    /// Long axis runs vertically.
    pub vertical: bool,
}

/// Inside test for a placement at pixel coordinates `(px, py)`.
pub struct Stencil {
    geom: Geometry,
    place: Placement,
}

impl Stencil {
    pub fn new(place: Placement) -> Self {
        Self {
            geom: geometry(place.shape),
            place,
        }
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        let b = &self.place.bbox;
        let s = 2.0 * (px - b.x) / b.w;
        let t = 2.0 * (py - b.y) / b.h;
        if s.abs() > 1.0 || t.abs() > 1.0 {
            return false;
        }
        let (a, c) = if self.place.vertical { (t, s) } else { (s, t) };
        let (u0, u1, v0, v1) = self.geom.bounds;
        let u = u0 + (a + 1.0) * 0.5 * (u1 - u0);
        let v = v0 + (c + 1.0) * 0.5 * (v1 - v0);
        (self.geom.inside)(u, v)
    }

    /// Fraction of subsamples of pixel `(col, row)` inside the shape.
    pub fn coverage(&self, col: usize, row: usize) -> f64 {
        let n = SUPERSAMPLE;
        let mut hits = 0;
        for i in 0..n {
            for j in 0..n {
                let px = col as f64 + (j as f64 + 0.5) / n as f64;
                let py = row as f64 + (i as f64 + 0.5) / n as f64;
                hits += usize::from(self.contains(px, py));
            }
        }
        hits as f64 / (n * n) as f64
    }

    /// Pixel rows and columns the box touches, clipped to the image.
    pub fn pixel_span(&self, size: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (x0, y0, x1, y1) = self.place.bbox.corners();
        let clip = |v: f64| (v.max(0.0) as usize).min(size);
        (clip(y0.floor())..clip(y1.ceil()), clip(x0.floor())..clip(x1.ceil()))
    }
}

/// Planar RGB canvas with values in `[0, 1]`, stored channel-major.
pub struct Canvas {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Canvas {
    /// Smooth random gradient plus low-frequency ripples.
    pub fn textured(size: usize, rng: &mut impl Rng) -> Self {
        let base = rng.gen_range(0.3..0.62);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let angle = rng.gen_range(0.0..PI);
                let freq = rng.gen_range(1.0..5.0) * 2.0 * PI / size as f64;
                (angle.cos() * freq, angle.sin() * freq, rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.02..0.06))
            })
            .collect();
        let mut data = vec![0.0; 3 * size * size];
        for r in 0..size {
            for c in 0..size {
                let ripple: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph, amp)| amp * (fx * c as f64 + fy * r as f64 + ph).sin())
                    .sum();
                for ch in 0..3 {
                    data[ch * size * size + r * size + c] = base + tint[ch] + ripple;
                }
            }
        }
        Self { size, data }
    }

    pub fn paint(&mut self, stencil: &Stencil, rgb: [f64; 3]) {
        let n = self.size;
        let (rows, cols) = stencil.pixel_span(n);
        for r in rows {
            for c in cols.clone() {
                let alpha = stencil.coverage(c, r);
                if alpha > 0.0 {
                    for (ch, &col) in rgb.iter().enumerate() {
                        let px = &mut self.data[ch * n * n + r * n + c];
                        *px = alpha * col + (1.0 - alpha) * *px;
                    }
                }
            }
        }
    }

    /// Adds pixel noise and quantizes to 8 bits, interleaved RGB.
    pub fn quantize(&self, noise: f64, rng: &mut impl Rng) -> Vec<u8> {
        let n = self.size * self.size;
        let mut out = vec![0u8; 3 * n];
        for p in 0..n {
            for ch in 0..3 {
                let v = self.data[ch * n + p] + rng.gen_range(-noise..=noise);
                out[3 * p + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }
}
