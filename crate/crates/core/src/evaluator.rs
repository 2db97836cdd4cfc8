//! Role mean average precision: greedy per-scene matching of detections to
//! ground-truth triplets, then all-point interpolated AP per verb.

use std::fmt::Write as _;

use crate::decoder::Detection;
use crate::geometry::{iou, BBox};
use crate::synthdata::SceneSpec;

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtTriplet {
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    pub verb: usize,
}

impl GtTriplet {
    pub fn from_scene(scene: &SceneSpec) -> Vec<GtTriplet> {
        scene
            .interactions
            .iter()
            .map(|it| {
                let o = scene.objects[it.object];
                GtTriplet {
                    human_box: scene.humans[it.human],
                    object_box: o.bbox,
                    object_class: o.class,
                    verb: it.verb,
                }
            })
            .collect()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("detections cover {detections} scenes but ground truth has {ground_truth}")]
    SceneMismatch { detections: usize, ground_truth: usize },
}

/// A scored detection's outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Labeled {
    pub verb: usize,
    pub score: f64,
    pub tp: bool,
}

/// Greedy matching in score order (stable for equal scores). A detection
/// claims the unclaimed ground truth with the same verb and object class that
/// maximizes `min(iou_h, iou_o)`, provided both reach `iou_thr`; ties go to
/// the lowest ground-truth index.
pub fn match_scene(dets: &[Detection], gts: &[GtTriplet], iou_thr: f64) -> Vec<Labeled> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut claimed = vec![false; gts.len()];
    order
        .into_iter()
        .map(|di| {
            let d = &dets[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if claimed[gi] || g.verb != d.verb || g.object_class != d.object_class {
                    continue;
                }
                let (ih, io) = (iou(&d.human_box, &g.human_box), iou(&d.object_box, &g.object_box));
                if ih < iou_thr || io < iou_thr {
                    continue;
                }
                let q = ih.min(io);
                if best.is_none_or(|(_, bq)| q > bq) {
                    best = Some((gi, q));
                }
            }
            if let Some((gi, _)) = best {
                claimed[gi] = true;
            }
            Labeled {
                verb: d.verb,
                score: d.score,
                tp: best.is_some(),
            }
        })
        .collect()
}

/// All-point interpolated AP of `labels` (already sorted by score
/// descending) against `n_gt` ground truths.
pub fn average_precision(labels: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(labels.len());
    let mut recall = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    for (rank, &is_tp) in labels.iter().enumerate() {
        tp += usize::from(is_tp);
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Precision envelope: best precision at this recall or beyond.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &is_tp) in labels.iter().enumerate() {
        if is_tp {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerbStats {
    pub verb: usize,
    pub n_gt: usize,
    pub n_tp: usize,
    pub n_fp: usize,
    /// `None` when the verb has no ground truth and is left out of the mean.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub verbs: Vec<VerbStats>,
    pub map_role: f64,
}

impl EvalReport {
    pub fn ap(&self, verb: usize) -> Option<f64> {
        self.verbs.get(verb).and_then(|v| v.ap)
    }

    /// `verb,n_gt,n_tp,n_fp,ap` rows then `map_role,<value>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("verb,n_gt,n_tp,n_fp,ap\n");
        for v in &self.verbs {
            let ap = v.ap.map(|a| a.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{}", v.verb, v.n_gt, v.n_tp, v.n_fp, ap).expect("string write");
        }
        writeln!(out, "map_role,{}", self.map_role).expect("string write");
        out
    }
}

/// Pools every scene's labels per verb and averages AP over verbs with
/// ground truth.
pub fn evaluate(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtTriplet>],
    num_verbs: usize,
    iou_thr: f64,
) -> Result<EvalReport, EvalError> {
    if dets.len() != gts.len() {
        return Err(EvalError::SceneMismatch {
            detections: dets.len(),
            ground_truth: gts.len(),
        });
    }
    let mut labeled: Vec<Labeled> = dets
        .iter()
        .zip(gts)
        .flat_map(|(d, g)| match_scene(d, g, iou_thr))
        .collect();
    // Stable: equal scores keep scene order.
    labeled.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut verbs = Vec::with_capacity(num_verbs);
    for verb in 0..num_verbs {
        let n_gt = gts.iter().flatten().filter(|g| g.verb == verb).count();
        let labels: Vec<bool> = labeled.iter().filter(|l| l.verb == verb).map(|l| l.tp).collect();
        let n_tp = labels.iter().filter(|&&t| t).count();
        verbs.push(VerbStats {
            verb,
            n_gt,
            n_tp,
            n_fp: labels.len() - n_tp,
            ap: (n_gt > 0).then(|| average_precision(&labels, n_gt)),
        });
    }
    let included: Vec<f64> = verbs.iter().filter_map(|v| v.ap).collect();
    let map_role = if included.is_empty() {
        0.0
    } else {
        included.iter().sum::<f64>() / included.len() as f64
    };
    Ok(EvalReport { verbs, map_role })
}
