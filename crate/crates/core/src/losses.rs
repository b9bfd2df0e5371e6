//! Training objectives: detector classification/regression, the per-cell
//! attention mask loss, the occlusion-weighted classification loss and their
//! weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mga::{occlusion_weight, CoarseMask, ProbabilityMap};
use crate::tensor::{Graph, Var};

/// Log arguments are clamped to `[CLAMP_EPS, 1 − CLAMP_EPS]`.
pub const CLAMP_EPS: f64 = 1e-7;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassTarget {
    Background,
    Pedestrian,
}

impl ClassTarget {
    pub fn value(self) -> f64 {
        match self {
            ClassTarget::Background => 0.0,
            ClassTarget::Pedestrian => 1.0,
        }
    }
}

/// One binary cross-entropy term with its derivative in `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeTerm {
    pub value: f64,
    pub d_pred: f64,
    pub clamped: bool,
}

/// `−[t·ln p + (1 − t)·ln(1 − p)]` for a target in `[0, 1]`. A clamped
/// prediction has zero derivative.
pub fn cross_entropy_term(predicted: f64, target: f64) -> CeTerm {
    let clamped = !(CLAMP_EPS..=1.0 - CLAMP_EPS).contains(&predicted);
    let p = predicted.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
    let value = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
    let d_pred = if clamped {
        0.0
    } else {
        -target / p + (1.0 - target) / (1.0 - p)
    };
    CeTerm {
        value,
        d_pred,
        clamped,
    }
}

pub fn cross_entropy(predicted: f64, target: ClassTarget) -> f64 {
    cross_entropy_term(predicted, target.value()).value
}

/// Summed over the four coordinates: `0.5·d²` if `|d| < 1`, else `|d| − 0.5`.
pub fn smooth_l1(pred: &[f64; 4], target: &[f64; 4]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            }
        })
        .sum()
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// A batch-level loss value with its bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLoss {
    pub value: f64,
    pub clamp_events: usize,
    /// No positive proposals contributed; the value is 0.
    pub empty: bool,
}

/// Mean per-cell BCE between predicted maps and mask targets over the
/// proposals flagged positive.
pub fn mask_bce_loss(
    predicted: &[ProbabilityMap],
    targets: &[CoarseMask],
    positive: &[bool],
) -> Result<BatchLoss> {
    if predicted.len() != targets.len() || predicted.len() != positive.len() {
        return Err(Error::contract(
            "mask_bce_loss",
            format!(
                "{} maps, {} masks and {} flags",
                predicted.len(),
                targets.len(),
                positive.len()
            ),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut clamp_events = 0;
    for ((map, mask), _) in predicted
        .iter()
        .zip(targets)
        .zip(positive)
        .filter(|(_, &pos)| pos)
    {
        if map.h() != mask.h || map.w() != mask.w {
            return Err(Error::contract(
                "mask_bce_loss",
                format!("map {}x{} vs mask {}x{}", map.h(), map.w(), mask.h, mask.w),
            ));
        }
        for (&p, &t) in map.values.data().iter().zip(&mask.values) {
            let term = cross_entropy_term(p, t);
            sum += term.value;
            clamp_events += term.clamped as usize;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(BatchLoss {
            empty: true,
            ..Default::default()
        });
    }
    Ok(BatchLoss {
        value: sum / count as f64,
        clamp_events,
        empty: false,
    })
}

/// `(1/N) Σ (1 − mean(mask_n)) · CE(score_n, target_n)` over positive
/// proposals.
pub fn occlusion_sensitive_loss(
    scores: &[f64],
    class_targets: &[ClassTarget],
    masks: &[CoarseMask],
) -> Result<BatchLoss> {
    if scores.len() != class_targets.len() || scores.len() != masks.len() {
        return Err(Error::contract(
            "occlusion_sensitive_loss",
            format!(
                "{} scores, {} targets and {} masks",
                scores.len(),
                class_targets.len(),
                masks.len()
            ),
        ));
    }
    if scores.is_empty() {
        return Ok(BatchLoss {
            empty: true,
            ..Default::default()
        });
    }
    let mut sum = 0.0;
    let mut clamp_events = 0;
    for ((&p, &t), mask) in scores.iter().zip(class_targets).zip(masks) {
        let term = cross_entropy_term(p, t.value());
        sum += occlusion_weight(mask)? * term.value;
        clamp_events += term.clamped as usize;
    }
    Ok(BatchLoss {
        value: sum / scores.len() as f64,
        clamp_events,
        empty: false,
    })
}

/// The separately computed loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_rpn_cls: f64,
    pub l_rpn_reg: f64,
    pub l_rcnn_cls: f64,
    pub l_rcnn_reg: f64,
    pub l_mask: f64,
    pub l_occ: f64,
}

impl LossParts {
    /// The detector loss: both proposal-stage and both RoI-stage terms.
    pub fn detector(&self) -> f64 {
        self.l_rpn_cls + self.l_rpn_reg + self.l_rcnn_cls + self.l_rcnn_reg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rpn_cls: f64,
    pub l_rpn_reg: f64,
    pub l_rcnn_cls: f64,
    pub l_rcnn_reg: f64,
    pub l_mask: f64,
    pub l_occ: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

/// `detector + α·l_mask + β·l_occ`.
pub fn total_loss(parts: LossParts, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    let terms = [
        parts.l_rpn_cls,
        parts.l_rpn_reg,
        parts.l_rcnn_cls,
        parts.l_rcnn_reg,
        parts.l_mask,
        parts.l_occ,
    ];
    if terms.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::contract(
            "total_loss",
            format!("loss terms must be non-negative, got {parts:?}"),
        ));
    }
    Ok(LossBreakdown {
        l_rpn_cls: parts.l_rpn_cls,
        l_rpn_reg: parts.l_rpn_reg,
        l_rcnn_cls: parts.l_rcnn_cls,
        l_rcnn_reg: parts.l_rcnn_reg,
        l_mask: parts.l_mask,
        l_occ: parts.l_occ,
        alpha,
        beta,
        total: parts.detector() + alpha * parts.l_mask + beta * parts.l_occ,
    })
}

/// Records `Σ w_i · CE(pred_i, target_i) / denom` on the graph. Returns the
/// scalar and the number of clamped predictions.
pub fn bce_graph(
    g: &mut Graph,
    pred: Var,
    targets: &[f64],
    weights: &[f64],
    denom: f64,
) -> Result<(Var, usize)> {
    let p = g.value(pred);
    if p.len() != targets.len() || p.len() != weights.len() || !(denom > 0.0) {
        return Err(Error::contract(
            "bce",
            format!(
                "{} predictions, {} targets, {} weights, denominator {denom}",
                p.len(),
                targets.len(),
                weights.len()
            ),
        ));
    }
    let mut value = 0.0;
    let mut clamps = 0;
    let mut grad = Vec::with_capacity(p.len());
    for ((&pi, &ti), &wi) in p.iter().zip(targets).zip(weights) {
        if wi == 0.0 {
            grad.push(0.0);
            continue;
        }
        let term = cross_entropy_term(pi, ti);
        value += wi * term.value;
        clamps += term.clamped as usize;
        grad.push(wi * term.d_pred / denom);
    }
    Ok((g.reduce(pred, value / denom, grad)?, clamps))
}

/// Records `Σ_n w_n · smooth_l1(pred_n, target_n) / denom` for `pred` of
/// shape `[N, 4]`.
pub fn smooth_l1_graph(
    g: &mut Graph,
    pred: Var,
    targets: &[[f64; 4]],
    weights: &[f64],
    denom: f64,
) -> Result<Var> {
    let p = g.value(pred);
    if p.len() != 4 * targets.len() || targets.len() != weights.len() || !(denom > 0.0) {
        return Err(Error::contract(
            "smooth_l1",
            format!(
                "{} values for {} targets and {} weights",
                p.len(),
                targets.len(),
                weights.len()
            ),
        ));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (n, (t, &w)) in targets.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let row: [f64; 4] = p[4 * n..4 * n + 4].try_into().expect("row of 4");
        value += w * smooth_l1(&row, t);
        for k in 0..4 {
            grad[4 * n + k] = w * smooth_l1_grad(row[k] - t[k]) / denom;
        }
    }
    g.reduce(pred, value / denom, grad)
}
