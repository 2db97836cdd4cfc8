use super::{DataConfig, SceneSpec};
use crate::geometry::{displacements, gaussian_radius, gaussian_splat, midpoint, BBox, GridSpec, Point};
use crate::netops::Tensor;

/// Training targets on the output grid.
///
/// `disp` channels are `(dp_ih.x, dp_ih.y, dp_io.x, dp_io.y)`, `wh` is
/// `(w, h)` in image pixels and `off` is the sub-cell residual `(dx, dy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub hm_h: Tensor,
    pub hm_o: Tensor,
    pub hm_i: Tensor,
    pub disp: Tensor,
    pub wh: Tensor,
    pub off: Tensor,
    pub disp_mask: Tensor,
    pub reg_mask: Tensor,
    /// Displacement or regression writes dropped because their cell was
    /// already taken.
    pub collisions: usize,
}

impl TargetMaps {
    /// `hm_h` and `hm_o` stacked, matching the `1+K` instance head.
    pub fn hm_ho(&self) -> Tensor {
        Tensor::concat(&[&self.hm_h, &self.hm_o]).expect("same grid")
    }
}

/// Floor-quantized grid cell of a box center and the residual offset.
pub(crate) fn quantize(b: &BBox, grid: &GridSpec) -> ((usize, usize), (f64, f64)) {
    let gx = b.cx / grid.stride as f64;
    let gy = b.cy / grid.stride as f64;
    let (fx, fy) = (gx.floor(), gy.floor());
    let cx = (fx.max(0.0) as usize).min(grid.width - 1);
    let cy = (fy.max(0.0) as usize).min(grid.height - 1);
    ((cx, cy), (gx - cx as f64, gy - cy as f64))
}

fn plane_mut<'a>(t: &'a mut Tensor, channel: usize, grid: &GridSpec) -> &'a mut [f64] {
    let n = grid.cells();
    &mut t.data_mut()[channel * n..(channel + 1) * n]
}

/// Encodes one scene into heatmaps, displacement/size/offset maps and masks.
///
/// Instance centers are floor-quantized first; each interaction point is the
/// floor of the midpoint of its two quantized cells, so stored displacements
/// are whole cells.
pub fn encode_targets(scene: &SceneSpec, config: &DataConfig) -> TargetMaps {
    let grid = config.grid;
    let (h, w) = (grid.height, grid.width);
    let mut t = TargetMaps {
        hm_h: Tensor::zeros(&[1, h, w]),
        hm_o: Tensor::zeros(&[config.num_object_classes, h, w]),
        hm_i: Tensor::zeros(&[config.num_verbs, h, w]),
        disp: Tensor::zeros(&[4, h, w]),
        wh: Tensor::zeros(&[2, h, w]),
        off: Tensor::zeros(&[2, h, w]),
        disp_mask: Tensor::zeros(&[1, h, w]),
        reg_mask: Tensor::zeros(&[1, h, w]),
        collisions: 0,
    };

    let write_instance = |t: &mut TargetMaps, b: &BBox, heat_is_human: bool, class: usize| {
        let ((cx, cy), (ox, oy)) = quantize(b, &grid);
        let center = Point::new(cx as f64, cy as f64);
        let radius = gaussian_radius(b, &grid);
        let plane = if heat_is_human {
            plane_mut(&mut t.hm_h, 0, &grid)
        } else {
            plane_mut(&mut t.hm_o, class, &grid)
        };
        gaussian_splat(plane, &grid, center, radius).expect("quantized center is on the grid");
        if t.reg_mask.at3(0, cy, cx) == 0.0 {
            t.reg_mask.set3(0, cy, cx, 1.0);
            t.wh.set3(0, cy, cx, b.w);
            t.wh.set3(1, cy, cx, b.h);
            t.off.set3(0, cy, cx, ox);
            t.off.set3(1, cy, cx, oy);
        } else {
            t.collisions += 1;
        }
        center
    };

    let human_pts: Vec<Point> = scene
        .humans
        .iter()
        .map(|b| write_instance(&mut t, b, true, 0))
        .collect();
    let object_pts: Vec<Point> = scene
        .objects
        .iter()
        .map(|o| write_instance(&mut t, &o.bbox, false, o.class))
        .collect();

    for it in &scene.interactions {
        let (hp, op) = (human_pts[it.human], object_pts[it.object]);
        let m = midpoint(hp, op);
        let ip = Point::new(m.x.floor(), m.y.floor());
        let radius = gaussian_radius(&scene.humans[it.human], &grid)
            .min(gaussian_radius(&scene.objects[it.object].bbox, &grid));
        let plane = plane_mut(&mut t.hm_i, it.verb, &grid);
        gaussian_splat(plane, &grid, ip, radius).expect("midpoint of on-grid cells");
        let (ix, iy) = (ip.x as usize, ip.y as usize);
        if t.disp_mask.at3(0, iy, ix) == 0.0 {
            let (dh, dobj) = displacements(ip, hp, op);
            t.disp_mask.set3(0, iy, ix, 1.0);
            t.disp.set3(0, iy, ix, dh.dx);
            t.disp.set3(1, iy, ix, dh.dy);
            t.disp.set3(2, iy, ix, dobj.dx);
            t.disp.set3(3, iy, ix, dobj.dy);
        } else {
            t.collisions += 1;
        }
    }
    t
}
