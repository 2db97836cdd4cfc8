//! Training objective: penalty-reduced focal loss on heatmaps, masked L1 on
//! displacement and box regression maps, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::netops::{CustomOp, NetError, Tape, Tensor, Var};

/// Displacement weight in the total loss.
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalHyper {
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
}

impl Default for FocalHyper {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
            eps: 1e-12,
        }
    }
}

fn check_same(op: &str, a: &[usize], b: &[usize]) -> Result<(), NetError> {
    if a != b {
        return Err(NetError::Shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn positives(gt: &[f64]) -> usize {
    gt.iter().filter(|&&y| y == 1.0).count()
}

/// `−(1/max(1, n_pos)) Σ [y=1: (1−p)^α log p ; y<1: (1−y)^β p^α log(1−p)]`
/// with `p` clamped to `[eps, 1−eps]`.
pub fn focal_loss_value(pred: &[f64], gt: &[f64], h: &FocalHyper) -> f64 {
    let norm = positives(gt).max(1) as f64;
    let mut acc = 0.0;
    for (&p, &y) in pred.iter().zip(gt) {
        let p = p.clamp(h.eps, 1.0 - h.eps);
        acc += if y == 1.0 {
            (1.0 - p).powf(h.alpha) * p.ln()
        } else {
            (1.0 - y).powf(h.beta) * p.powf(h.alpha) * (1.0 - p).ln()
        };
    }
    -acc / norm
}

fn focal_grad(pred: &[f64], gt: &[f64], h: &FocalHyper) -> Vec<f64> {
    let norm = positives(gt).max(1) as f64;
    let (a, lo, hi) = (h.alpha, h.eps, 1.0 - h.eps);
    pred.iter()
        .zip(gt)
        .map(|(&p, &y)| {
            if p < lo || p > hi {
                return 0.0;
            }
            let d = if y == 1.0 {
                -a * (1.0 - p).powf(a - 1.0) * p.ln() + (1.0 - p).powf(a) / p
            } else {
                (1.0 - y).powf(h.beta) * (a * p.powf(a - 1.0) * (1.0 - p).ln() - p.powf(a) / (1.0 - p))
            };
            -d / norm
        })
        .collect()
}

struct FocalOp {
    gt: Tensor,
    hyper: FocalHyper,
}

impl CustomOp for FocalOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.item();
        let data = focal_grad(inputs[0].data(), self.gt.data(), &self.hyper)
            .into_iter()
            .map(|d| d * g)
            .collect();
        vec![Some(Tensor::new(inputs[0].shape(), data).expect("same shape"))]
    }
}

/// Focal loss of a sigmoid heatmap against a Gaussian target, on the tape.
pub fn focal_loss(tape: &mut Tape, pred: Var, gt: &Tensor, hyper: &FocalHyper) -> Result<Var, NetError> {
    check_same("focal_loss", tape.shape(pred), gt.shape())?;
    let value = focal_loss_value(tape.value(pred).data(), gt.data(), hyper);
    Ok(tape.custom(
        &[pred],
        Tensor::scalar(value),
        Box::new(FocalOp {
            gt: gt.clone(),
            hyper: *hyper,
        }),
    ))
}

/// `Σ_{mask=1} Σ_c |pred − gt| / max(1, count(mask=1))`.
pub fn masked_l1_value(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> f64 {
    let plane = mask.len();
    let count = mask.data().iter().filter(|&&m| m != 0.0).count().max(1) as f64;
    let mut acc = 0.0;
    for (i, (p, y)) in pred.data().iter().zip(gt.data()).enumerate() {
        if mask.data()[i % plane] != 0.0 {
            acc += (p - y).abs();
        }
    }
    acc / count
}

struct MaskedL1Op {
    gt: Tensor,
    mask: Tensor,
}

impl CustomOp for MaskedL1Op {
    fn name(&self) -> &'static str {
        "masked_l1"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let plane = self.mask.len();
        let count = self.mask.data().iter().filter(|&&m| m != 0.0).count().max(1) as f64;
        let g = grad.item() / count;
        let data = inputs[0]
            .data()
            .iter()
            .zip(self.gt.data())
            .enumerate()
            .map(|(i, (p, y))| {
                if self.mask.data()[i % plane] == 0.0 || p == y {
                    0.0
                } else {
                    g * (p - y).signum()
                }
            })
            .collect();
        vec![Some(Tensor::new(inputs[0].shape(), data).expect("same shape"))]
    }
}

pub fn masked_l1(tape: &mut Tape, pred: Var, gt: &Tensor, mask: &Tensor) -> Result<Var, NetError> {
    check_same("masked_l1", tape.shape(pred), gt.shape())?;
    let ps = tape.shape(pred);
    let ms = mask.shape();
    if ps.len() != 3 || ms != [1, ps[1], ps[2]] {
        return Err(NetError::Shape(format!(
            "masked_l1: mask {ms:?} does not cover prediction {ps:?}"
        )));
    }
    let value = masked_l1_value(tape.value(pred), gt, mask);
    Ok(tape.custom(
        &[pred],
        Tensor::scalar(value),
        Box::new(MaskedL1Op {
            gt: gt.clone(),
            mask: mask.clone(),
        }),
    ))
}

/// Six loss components plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ho: f64,
    pub l_i: f64,
    pub l_dh: f64,
    pub l_do: f64,
    pub l_wh: f64,
    pub l_off: f64,
    pub total: f64,
    /// Positive heatmap cells across the instance and interaction maps.
    pub n_pos: usize,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,l_ho,l_i,l_dh,l_do,l_wh,l_off,total";

    pub fn components(&self) -> [(&'static str, f64); 7] {
        [
            ("l_ho", self.l_ho),
            ("l_i", self.l_i),
            ("l_dh", self.l_dh),
            ("l_do", self.l_do),
            ("l_wh", self.l_wh),
            ("l_off", self.l_off),
            ("total", self.total),
        ]
    }

    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.components()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }

    pub fn csv_row(&self, step: u64) -> String {
        let mut row = step.to_string();
        for (_, v) in self.components() {
            row.push(',');
            row.push_str(&format!("{v:e}"));
        }
        row
    }

    /// Component-wise mean in the given order.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            l_ho: sum(|p| p.l_ho),
            l_i: sum(|p| p.l_i),
            l_dh: sum(|p| p.l_dh),
            l_do: sum(|p| p.l_do),
            l_wh: sum(|p| p.l_wh),
            l_off: sum(|p| p.l_off),
            total: sum(|p| p.total),
            n_pos: parts.iter().map(|p| p.n_pos).sum(),
        }
    }
}

/// Raw component values, before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l_ho: f64,
    pub l_i: f64,
    pub l_dh: f64,
    pub l_do: f64,
    pub l_wh: f64,
    pub l_off: f64,
    pub n_pos: usize,
}

fn weighted(p: &LossParts, lambda: f64) -> f64 {
    (p.l_ho + p.l_i) + (p.l_dh + p.l_do) * lambda + (p.l_wh + p.l_off)
}

/// `(l_ho + l_i) + λ·(l_dh + l_do) + (l_wh + l_off)`.
pub fn total_loss(parts: &LossParts, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        l_ho: parts.l_ho,
        l_i: parts.l_i,
        l_dh: parts.l_dh,
        l_do: parts.l_do,
        l_wh: parts.l_wh,
        l_off: parts.l_off,
        total: weighted(parts, lambda),
        n_pos: parts.n_pos,
    }
}

/// Tape handles for the six components.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_ho: Var,
    pub l_i: Var,
    pub l_dh: Var,
    pub l_do: Var,
    pub l_wh: Var,
    pub l_off: Var,
}

/// Records the weighted total on the tape with the same association order as
/// [`total_loss`], so the tape value and the breakdown agree bit for bit.
pub fn record_total(tape: &mut Tape, v: &LossVars, lambda: f64, n_pos: usize) -> Result<(Var, LossBreakdown), NetError> {
    let p = tape.add(v.l_ho, v.l_i)?;
    let d = tape.add(v.l_dh, v.l_do)?;
    let d = tape.scale(d, lambda);
    let r = tape.add(v.l_wh, v.l_off)?;
    let pd = tape.add(p, d)?;
    let total = tape.add(pd, r)?;
    let item = |var| tape.value(var).item();
    let parts = LossParts {
        l_ho: item(v.l_ho),
        l_i: item(v.l_i),
        l_dh: item(v.l_dh),
        l_do: item(v.l_do),
        l_wh: item(v.l_wh),
        l_off: item(v.l_off),
        n_pos,
    };
    let breakdown = total_loss(&parts, lambda);
    debug_assert_eq!(breakdown.total.to_bits(), tape.value(total).item().to_bits());
    Ok((total, breakdown))
}
