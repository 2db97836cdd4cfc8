//! Inference: peak extraction, displacement-guided grouping of human, object
//! and interaction points into triplets, box reconstruction and scoring.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, GridSpec, Point};
use crate::netops::Tensor;
use crate::synthdata::TargetMaps;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Peaks kept per group.
    pub top_t: usize,
    /// Peaks scoring at or below this are ignored.
    pub s_min: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            top_t: 100,
            s_min: 0.01,
        }
    }
}

/// A surviving heatmap maximum. `class_id` indexes within its group
/// (human: always 0, object: `0..K`, interaction: `0..N`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub score: f64,
    pub class_id: usize,
    /// `class_id·H·W + y·W + x`, the tie-break key within the group.
    pub order: usize,
}

impl Peak {
    pub fn point(&self) -> Point {
        Point::new(self.x as f64, self.y as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub verb: usize,
    pub object_class: usize,
    pub score: f64,
    #[serde(with = "box_array")]
    pub human_box: BBox,
    #[serde(with = "box_array")]
    pub object_box: BBox,
}

mod box_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::geometry::BBox;

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        b.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        <[f64; 4]>::deserialize(d).map(BBox::from_array)
    }
}

/// Cells that are `≥` all 8 neighbours and carry the lowest row-major index
/// of their 8-connected group of such cells.
///
/// Adjacent local maxima are necessarily equal, so each group is one plateau.
pub fn local_maxima(plane: &[f64], height: usize, width: usize) -> Vec<usize> {
    let neighbours = |i: usize| {
        let (y, x) = ((i / width) as isize, (i % width) as isize);
        (-1isize..=1)
            .flat_map(move |dy| (-1isize..=1).map(move |dx| (dy, dx)))
            .filter(|&d| d != (0, 0))
            .filter_map(move |(dy, dx)| {
                let (ny, nx) = (y + dy, x + dx);
                (ny >= 0 && nx >= 0 && (ny as usize) < height && (nx as usize) < width)
                    .then(|| ny as usize * width + nx as usize)
            })
    };
    let is_max: Vec<bool> = (0..plane.len())
        .map(|i| neighbours(i).all(|j| plane[i] >= plane[j]))
        .collect();
    let mut seen = vec![false; plane.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..plane.len() {
        if !is_max[start] || seen[start] {
            continue;
        }
        // Row-major scan reaches each group at its lowest index first.
        out.push(start);
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for j in neighbours(i) {
                if is_max[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    out
}

fn by_score_then_order(a: &Peak, b: &Peak) -> Ordering {
    b.score.total_cmp(&a.score).then(a.order.cmp(&b.order))
}

/// Top `top_t` peaks pooled over `channels` of `hm`, sorted by score
/// descending then `order` ascending.
pub fn extract_peaks(hm: &Tensor, channels: std::ops::Range<usize>, top_t: usize) -> Vec<Peak> {
    let (h, w) = (hm.shape()[1], hm.shape()[2]);
    let n = h * w;
    let mut peaks = Vec::new();
    for (class_id, c) in channels.enumerate() {
        let plane = &hm.data()[c * n..(c + 1) * n];
        for idx in local_maxima(plane, h, w) {
            peaks.push(Peak {
                x: idx % w,
                y: idx / w,
                score: plane[idx],
                class_id,
                order: class_id * n + idx,
            });
        }
    }
    peaks.sort_by(by_score_then_order);
    peaks.truncate(top_t);
    peaks
}

/// Box whose center is `(cell + off)·stride` and size is the `wh` entry.
pub fn reconstruct_box(x: usize, y: usize, wh: &Tensor, off: &Tensor, grid: &GridSpec) -> BBox {
    let s = grid.stride as f64;
    BBox::new(
        (x as f64 + off.at3(0, y, x)) * s,
        (y as f64 + off.at3(1, y, x)) * s,
        wh.at3(0, y, x),
        wh.at3(1, y, x),
    )
}

pub fn score_triplet(s_h: f64, s_i: f64, s_o: f64) -> f64 {
    s_h * s_i * s_o
}

/// Candidate nearest (in distance per unit score) to `target`.
fn best_candidate(candidates: &[Peak], target: Point) -> Option<&Peak> {
    let cost = |p: &Peak| p.point().distance(target) / p.score;
    candidates.iter().min_by(|a, b| {
        cost(a)
            .total_cmp(&cost(b))
            .then(b.score.total_cmp(&a.score))
            .then(a.order.cmp(&b.order))
    })
}

/// Maps read during grouping; `disp` holds `(dp_ih.x, dp_ih.y, dp_io.x, dp_io.y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeMaps {
    /// Human channel followed by the `K` object channels.
    pub hm_ho: Tensor,
    pub hm_i: Tensor,
    pub disp: Tensor,
    pub wh: Tensor,
    pub off: Tensor,
}

impl DecodeMaps {
    /// Ground-truth maps, as a perfect prediction.
    pub fn from_targets(t: &TargetMaps) -> Self {
        Self {
            hm_ho: t.hm_ho(),
            hm_i: t.hm_i.clone(),
            disp: t.disp.clone(),
            wh: t.wh.clone(),
            off: t.off.clone(),
        }
    }
}

pub fn group_triplets(
    h_peaks: &[Peak],
    o_peaks: &[Peak],
    i_peaks: &[Peak],
    maps: &DecodeMaps,
    grid: &GridSpec,
    s_min: f64,
) -> Vec<Detection> {
    let keep = |ps: &[Peak]| ps.iter().copied().filter(|p| p.score > s_min).collect::<Vec<_>>();
    let (humans, objects) = (keep(h_peaks), keep(o_peaks));
    if humans.is_empty() || objects.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for ip in i_peaks.iter().filter(|p| p.score > s_min) {
        let d = |c| maps.disp.at3(c, ip.y, ip.x);
        let target_h = Point::new(ip.x as f64 + d(0), ip.y as f64 + d(1));
        let target_o = Point::new(ip.x as f64 + d(2), ip.y as f64 + d(3));
        let (Some(h), Some(o)) = (best_candidate(&humans, target_h), best_candidate(&objects, target_o))
        else {
            continue;
        };
        out.push(Detection {
            verb: ip.class_id,
            object_class: o.class_id,
            score: score_triplet(h.score, ip.score, o.score),
            human_box: reconstruct_box(h.x, h.y, &maps.wh, &maps.off, grid),
            object_box: reconstruct_box(o.x, o.y, &maps.wh, &maps.off, grid),
        });
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Full decode of one scene's maps.
pub fn decode(maps: &DecodeMaps, grid: &GridSpec, cfg: &DecodeConfig) -> Vec<Detection> {
    let k1 = maps.hm_ho.shape()[0];
    let n = maps.hm_i.shape()[0];
    let h = extract_peaks(&maps.hm_ho, 0..1, cfg.top_t);
    let o = extract_peaks(&maps.hm_ho, 1..k1, cfg.top_t);
    let i = extract_peaks(&maps.hm_i, 0..n, cfg.top_t);
    group_triplets(&h, &o, &i, maps, grid, cfg.s_min)
}

/// `v` rounded to 9 significant digits.
pub fn round_sig9(v: f64) -> f64 {
    format!("{v:.8e}").parse().expect("formatted float")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDetections {
    scene: usize,
    detections: Vec<Detection>,
}

/// One JSON line per scene, scores at 9 significant digits.
pub fn write_detections(path: &Path, per_scene: &[Vec<Detection>]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (scene, dets) in per_scene.iter().enumerate() {
        let line = SceneDetections {
            scene,
            detections: dets
                .iter()
                .map(|d| Detection {
                    score: round_sig9(d.score),
                    ..*d
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Inverse of [`write_detections`]. Scene indices must run `0, 1, ...`.
pub fn read_detections(path: &Path) -> Result<Vec<Vec<Detection>>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parsed: SceneDetections =
            serde_json::from_str(line).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?;
        if parsed.scene != out.len() {
            return Err(format!(
                "{}:{}: scene {} out of sequence",
                path.display(),
                i + 1,
                parsed.scene
            ));
        }
        out.push(parsed.detections);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{gaussian_splat, iou};
    use crate::synthdata::{encode_targets, generate_scene, DataConfig};

    #[test]
    fn single_splat_single_peak() {
        let grid = GridSpec::new(8, 8, 4);
        let mut plane = vec![0.0; 64];
        gaussian_splat(&mut plane, &grid, Point::new(3.0, 5.0), 2).unwrap();
        let hm = Tensor::new(&[1, 8, 8], plane).unwrap();
        let peaks: Vec<_> = extract_peaks(&hm, 0..1, 10)
            .into_iter()
            .filter(|p| p.score > 0.0)
            .collect();
        assert_eq!(peaks.len(), 1);
        assert_eq!((peaks[0].x, peaks[0].y, peaks[0].score), (3, 5, 1.0));
    }

    #[test]
    fn uniform_plane_single_survivor() {
        let hm = Tensor::full(&[1, 5, 7], 0.3);
        let peaks = extract_peaks(&hm, 0..1, 10);
        assert_eq!(peaks.len(), 1);
        assert_eq!((peaks[0].x, peaks[0].y), (0, 0));
    }

    #[test]
    fn reconstruct_examples() {
        let grid = GridSpec::new(8, 8, 4);
        let mut wh = Tensor::zeros(&[2, 8, 8]);
        let mut off = Tensor::zeros(&[2, 8, 8]);
        wh.set3(0, 5, 4, 8.0);
        wh.set3(1, 5, 4, 6.0);
        off.set3(0, 5, 4, 0.2);
        off.set3(1, 5, 4, 0.3);
        let b = reconstruct_box(4, 5, &wh, &off, &grid);
        assert!((b.cx - 16.8).abs() < 1e-12 && (b.cy - 21.2).abs() < 1e-12);
        assert_eq!((b.w, b.h), (8.0, 6.0));
        let b = reconstruct_box(2, 3, &wh, &Tensor::zeros(&[2, 8, 8]), &grid);
        assert_eq!((b.cx, b.cy), (8.0, 12.0));
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_triplet(1.0, 1.0, 1.0), 1.0);
        assert_eq!(score_triplet(0.5, 0.5, 0.5), 0.125);
        assert!(score_triplet(0.6, 0.5, 0.5) >= score_triplet(0.5, 0.5, 0.5));
    }

    fn empty_maps(h: usize, w: usize) -> DecodeMaps {
        DecodeMaps {
            hm_ho: Tensor::zeros(&[2, h, w]),
            hm_i: Tensor::zeros(&[1, h, w]),
            disp: Tensor::zeros(&[4, h, w]),
            wh: Tensor::full(&[2, h, w], 4.0),
            off: Tensor::zeros(&[2, h, w]),
        }
    }

    #[test]
    fn at_target_candidate_beats_confident_distant_one() {
        let grid = GridSpec::new(16, 16, 4);
        let mut maps = empty_maps(16, 16);
        // I point at (5,5) pointing to a human at (3,5) and object at (7,5).
        maps.disp.set3(0, 5, 5, -2.0);
        maps.disp.set3(2, 5, 5, 2.0);
        let peak = |x, y, score, order| Peak {
            x,
            y,
            score,
            class_id: 0,
            order,
        };
        let humans = [peak(3, 5, 0.5, 83), peak(3, 10, 0.9, 163)];
        assert!((humans[1].point().distance(Point::new(3.0, 5.0)) / 0.9 - 5.56).abs() < 0.01);
        let objects = [peak(7, 5, 0.8, 87)];
        let inter = [peak(5, 5, 0.7, 85)];
        let dets = group_triplets(&humans, &objects, &inter, &maps, &grid, 0.01);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].human_box.cy, 20.0);
        assert!((dets[0].score - 0.5 * 0.7 * 0.8).abs() < 1e-15);

        let faint = [peak(7, 5, 0.005, 87)];
        assert!(group_triplets(&humans, &faint, &inter, &maps, &grid, 0.01).is_empty());
    }

    #[test]
    fn perfect_maps_reproduce_ground_truth() {
        let cfg = DataConfig::default();
        for i in 0..20 {
            let (scene, _) = generate_scene(&cfg, i).unwrap();
            let maps = DecodeMaps::from_targets(&encode_targets(&scene, &cfg));
            let dets = decode(&maps, &cfg.grid, &DecodeConfig::default());
            assert_eq!(dets.len(), scene.interactions.len());
            for it in &scene.interactions {
                let obj = scene.objects[it.object];
                assert!(dets.iter().any(|d| d.verb == it.verb
                    && d.object_class == obj.class
                    && iou(&d.human_box, &scene.humans[it.human]) >= 0.99
                    && iou(&d.object_box, &obj.bbox) >= 0.99));
            }
        }
    }

    #[test]
    fn detections_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.jsonl");
        let d = Detection {
            verb: 1,
            object_class: 2,
            score: 0.123456789123,
            human_box: BBox::new(1.0, 2.0, 3.0, 4.0),
            object_box: BBox::new(5.0, 6.0, 7.0, 8.0),
        };
        write_detections(&path, &[vec![d], vec![]]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"scene\":0,\"detections\":[{\"verb\":1,\"object_class\":2,\"score\":0.123456789,"));
        let back = read_detections(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0][0].score, 0.123456789);
        assert_eq!(back[0][0].human_box, d.human_box);
        assert_eq!(round_sig9(1.0), 1.0);
    }
}
