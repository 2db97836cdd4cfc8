use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataConfig, Dataset, Interaction, ObjectInstance, RasterImage, SceneSpec};
use crate::geometry::{midpoint, BBox, Point};
use crate::par::Executor;

/// Whole-scene placement attempts before giving up.
const MAX_ATTEMPTS: usize = 500;
/// Angular margin (radians) kept clear of verb-sector boundaries.
const SECTOR_MARGIN: f64 = 0.2;
const HUMAN_W: (u32, u32) = (8, 12);
const HUMAN_H: (u32, u32) = (14, 20);
const OBJECT_SIDE: (u32, u32) = (6, 12);
/// Distance between paired human and object centers, in pixels.
const PAIR_DISTANCE: (f64, f64) = (13.0, 22.0);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenerationError {
    #[error("scene {index}: no feasible placement after {attempts} attempts")]
    Infeasible { index: usize, attempts: usize },
}

/// Verb id of a human→object pair: the angular sector of the object center
/// as seen from the human center. Sector 0 is centered on +x and sectors
/// advance clockwise on screen (image y points down).
pub fn verb_for(human: &BBox, object: &BBox, num_verbs: usize) -> usize {
    let angle = (object.cy - human.cy).atan2(object.cx - human.cx);
    let width = 2.0 * PI / num_verbs as f64;
    let shifted = (angle + width / 2.0).rem_euclid(2.0 * PI);
    ((shifted / width).floor() as usize) % num_verbs
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    // splitmix64 of the pair keeps neighbouring indices decorrelated.
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn cell_of(b: &BBox, stride: f64) -> (i64, i64) {
    ((b.cx / stride).floor() as i64, (b.cy / stride).floor() as i64)
}

fn inside(b: &BBox, size: f64) -> bool {
    let (x0, y0, x1, y1) = b.corners();
    x0 >= 0.0 && y0 >= 0.0 && x1 <= size && y1 <= size
}

fn separated(a: &BBox, b: &BBox, gap: f64) -> bool {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    ax1 + gap <= bx0 || bx1 + gap <= ax0 || ay1 + gap <= by0 || by1 + gap <= ay0
}

fn try_place(config: &DataConfig, rng: &mut ChaCha8Rng) -> Option<SceneSpec> {
    let size = config.image_size as f64;
    let stride = config.grid.stride as f64;
    let n_humans = rng.random_range(config.humans_per_scene.min..=config.humans_per_scene.max);
    let n_objects = rng.random_range(config.objects_per_scene.min..=config.objects_per_scene.max);

    let mut scene = SceneSpec::default();
    for _ in 0..n_humans {
        let w = f64::from(rng.random_range(HUMAN_W.0..=HUMAN_W.1));
        let h = f64::from(rng.random_range(HUMAN_H.0..=HUMAN_H.1));
        if w >= size || h >= size {
            return None;
        }
        let cx = rng.random_range(w / 2.0..size - w / 2.0).round();
        let cy = rng.random_range(h / 2.0..size - h / 2.0).round();
        scene.humans.push(BBox::new(cx, cy, w, h));
    }

    let sector = 2.0 * PI / config.num_verbs as f64;
    let half_span = (sector / 2.0 - SECTOR_MARGIN).max(0.0);
    for o in 0..n_objects {
        let human = rng.random_range(0..n_humans);
        let class = rng.random_range(0..config.num_object_classes);
        let verb = rng.random_range(0..config.num_verbs);
        let angle = verb as f64 * sector + rng.random_range(-half_span..=half_span);
        let dist = rng.random_range(PAIR_DISTANCE.0..PAIR_DISTANCE.1);
        let side_w = f64::from(rng.random_range(OBJECT_SIDE.0..=OBJECT_SIDE.1));
        let side_h = f64::from(rng.random_range(OBJECT_SIDE.0..=OBJECT_SIDE.1));
        let anchor = scene.humans[human];
        let bbox = BBox::new(
            (anchor.cx + dist * angle.cos()).round(),
            (anchor.cy + dist * angle.sin()).round(),
            side_w,
            side_h,
        );
        // Rounding can move the center across a sector boundary.
        if verb_for(&anchor, &bbox, config.num_verbs) != verb {
            return None;
        }
        scene.objects.push(ObjectInstance { class, bbox });
        scene.interactions.push(Interaction {
            human,
            object: o,
            verb,
        });
    }

    let boxes: Vec<BBox> = scene
        .humans
        .iter()
        .copied()
        .chain(scene.objects.iter().map(|o| o.bbox))
        .collect();
    if !boxes.iter().all(|b| inside(b, size)) {
        return None;
    }
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if !separated(&boxes[i], &boxes[j], 1.0) {
                return None;
            }
        }
    }
    let mut cells: Vec<(i64, i64)> = boxes.iter().map(|b| cell_of(b, stride)).collect();
    cells.sort_unstable();
    cells.dedup();
    if cells.len() != boxes.len() {
        return None;
    }
    let mut i_cells: Vec<(i64, i64)> = scene
        .interactions
        .iter()
        .map(|it| {
            let (hx, hy) = cell_of(&scene.humans[it.human], stride);
            let (ox, oy) = cell_of(&scene.objects[it.object].bbox, stride);
            let m = midpoint(Point::new(hx as f64, hy as f64), Point::new(ox as f64, oy as f64));
            (m.x.floor() as i64, m.y.floor() as i64)
        })
        .collect();
    i_cells.sort_unstable();
    i_cells.dedup();
    if i_cells.len() != scene.interactions.len() {
        return None;
    }
    Some(scene)
}

/// Scene `index` of the corpus defined by `config`. A pure function of
/// `(config, index)`; placements avoid overlapping boxes and shared cells.
pub fn generate_scene(
    config: &DataConfig,
    index: usize,
) -> Result<(SceneSpec, RasterImage), GenerationError> {
    let mut rng = scene_rng(config.seed, index);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(scene) = try_place(config, &mut rng) {
            let image = render_scene(&scene, config.image_size, &mut rng);
            return Ok((scene, image));
        }
    }
    Err(GenerationError::Infeasible {
        index,
        attempts: MAX_ATTEMPTS,
    })
}

/// Scenes `0..count`, generated on `exec` and returned in index order.
pub fn generate_dataset(
    config: &DataConfig,
    count: usize,
    exec: &Executor,
) -> Result<Dataset, GenerationError> {
    let results = exec.map_range(count, |i| generate_scene(config, i));
    let mut scenes = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count);
    for r in results {
        let (s, img) = r?;
        scenes.push(s);
        images.push(img);
    }
    Ok(Dataset {
        config: config.clone(),
        scenes,
        images,
    })
}

const HUMAN_COLOR: [f32; 3] = [0.95, 0.4, 0.3];
const OBJECT_COLORS: [[f32; 3]; 6] = [
    [0.2, 0.9, 0.35],
    [0.3, 0.45, 0.95],
    [0.95, 0.85, 0.2],
    [0.8, 0.3, 0.9],
    [0.2, 0.85, 0.85],
    [0.95, 0.95, 0.95],
];

/// Shape test for a pixel center relative to the glyph box, in box-local
/// coordinates `u, v ∈ [-0.5, 0.5]`.
fn human_covers(u: f64, v: f64) -> bool {
    // Head disc on top, torso below.
    let head = (u / 0.3).powi(2) + ((v + 0.32) / 0.18).powi(2) <= 1.0;
    let torso = u.abs() <= 0.32 && (-0.14..=0.5).contains(&v);
    head || torso
}

fn object_covers(class: usize, u: f64, v: f64) -> bool {
    match class % 4 {
        0 => u * u + v * v <= 0.25,
        1 => {
            let m = u.abs().max(v.abs());
            (0.28..=0.5).contains(&m)
        }
        2 => u.abs() <= 0.14 || v.abs() <= 0.14,
        _ => u.abs() + v.abs() <= 0.5,
    }
}

fn paint<F: Fn(f64, f64) -> bool>(img: &mut RasterImage, b: &BBox, color: [f32; 3], covers: F) {
    let s = img.size;
    let (x0, y0, x1, y1) = b.corners();
    let (px0, py0) = (x0.floor().max(0.0) as usize, y0.floor().max(0.0) as usize);
    let (px1, py1) = ((x1.ceil() as usize).min(s), (y1.ceil() as usize).min(s));
    for py in py0..py1 {
        for px in px0..px1 {
            let u = (px as f64 + 0.5 - b.cx) / b.w;
            let v = (py as f64 + 0.5 - b.cy) / b.h;
            if u.abs() <= 0.5 && v.abs() <= 0.5 && covers(u, v) {
                for (c, value) in color.iter().enumerate() {
                    img.data[(c * s + py) * s + px] = *value;
                }
            }
        }
    }
}

/// Draws a scene: dim noisy background, one glyph family for humans and a
/// distinct shape/color per object class.
pub fn render_scene(scene: &SceneSpec, size: usize, rng: &mut ChaCha8Rng) -> RasterImage {
    let mut img = RasterImage::blank(size);
    for v in &mut img.data {
        *v = 0.06 + rng.random_range(0.0f32..0.06);
    }
    for h in &scene.humans {
        paint(&mut img, h, HUMAN_COLOR, human_covers);
    }
    for o in &scene.objects {
        let color = OBJECT_COLORS[o.class % OBJECT_COLORS.len()];
        paint(&mut img, &o.bbox, color, |u, v| object_covers(o.class, u, v));
    }
    img
}
