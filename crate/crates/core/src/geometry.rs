//! Points, boxes, displacements and Gaussian heatmap targets.
//!
//! Points and displacements live in output-grid cells; boxes live in image
//! pixels and are stored center-size.

use serde::{Deserialize, Serialize};

/// Output grid: `height × width` cells, each covering `stride` image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, stride: usize) -> Self {
        Self {
            height,
            width,
            stride,
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn is_valid(&self) -> bool {
        self.height >= 1 && self.width >= 1 && self.stride >= 1
    }

    /// Integer cell of `p` under rounding, if it lies on the grid.
    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let (x, y) = (p.x.round(), p.y.round());
        (x >= 0.0 && y >= 0.0 && (x as usize) < self.width && (y as usize) < self.height)
            .then_some((x as usize, y as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn offset(self, d: Displacement) -> Point {
        Point::new(self.x + d.dx, self.y + d.dy)
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Displacement {
    pub dx: f64,
    pub dy: f64,
}

impl std::ops::Neg for Displacement {
    type Output = Displacement;

    fn neg(self) -> Displacement {
        Displacement {
            dx: -self.dx,
            dy: -self.dy,
        }
    }
}

/// Center-size box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
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

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite())
    }

    /// `(x0, y0, x1, y1)` corners.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

pub fn midpoint(h: Point, o: Point) -> Point {
    Point::new((h.x + o.x) / 2.0, (h.y + o.y) / 2.0)
}

/// Displacements from an interaction point to its human and object points.
pub fn displacements(i: Point, h: Point, o: Point) -> (Displacement, Displacement) {
    (
        Displacement {
            dx: h.x - i.x,
            dy: h.y - i.y,
        },
        Displacement {
            dx: o.x - i.x,
            dy: o.y - i.y,
        },
    )
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TargetError {
    #[error("target encoding: center ({x}, {y}) lies outside the {width}×{height} grid")]
    OutsideGrid {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
}

/// Max-merges a Gaussian peak of the given radius into one `height×width`
/// plane (row-major). `σ = radius / 3`.
pub fn gaussian_splat(
    plane: &mut [f64],
    grid: &GridSpec,
    center: Point,
    radius: usize,
) -> Result<(), TargetError> {
    debug_assert_eq!(plane.len(), grid.cells());
    if grid.cell_of(center).is_none() || !center.x.is_finite() || !center.y.is_finite() {
        return Err(TargetError::OutsideGrid {
            x: center.x,
            y: center.y,
            width: grid.width,
            height: grid.height,
        });
    }
    let sigma = radius.max(1) as f64 / 3.0;
    let denom = 2.0 * sigma * sigma;
    for y in 0..grid.height {
        let dy = y as f64 - center.y;
        for x in 0..grid.width {
            let dx = x as f64 - center.x;
            let v = (-(dx * dx + dy * dy) / denom).exp();
            let cell = &mut plane[y * grid.width + x];
            if v > *cell {
                *cell = v;
            }
        }
    }
    Ok(())
}

/// Splat radius in cells for a box: `max(1, ⌊min(w, h) / (3·stride)⌋)`.
pub fn gaussian_radius(b: &BBox, grid: &GridSpec) -> usize {
    let r = (b.w.min(b.h) / (3.0 * grid.stride as f64)).floor();
    if r >= 1.0 {
        r as usize
    } else {
        1
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // Areas from the same corner arithmetic keep iou(a, a) exactly 1.
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
