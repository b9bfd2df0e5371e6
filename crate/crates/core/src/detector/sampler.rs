//! Training proposals drawn around ground truth, standing in for a learned
//! region proposal network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boxes::{encode_deltas, iou, BBox};
use crate::error::{Error, Result};
use crate::mga::PedAnnotation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub label: Label,
    /// Deltas from the proposal to its matched full-body box (positives only).
    pub regression_target: Option<[f64; 4]>,
    pub matched_annotation: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Maximum shift and scale change as a fraction of box size.
    pub jitter: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
    /// Height range of negative boxes in pixels.
    pub negative_min_height: f64,
    pub negative_max_height: f64,
    /// Width / height of negative boxes.
    pub aspect: f64,
    pub max_attempts: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            jitter: 0.2,
            positive_iou: 0.5,
            negative_iou: 0.3,
            negative_min_height: 40.0,
            negative_max_height: 90.0,
            aspect: 0.41,
            max_attempts: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampledProposals {
    pub proposals: Vec<Proposal>,
    pub warnings: Vec<String>,
}

impl SampledProposals {
    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }
}

/// Draws `count_pos` jittered ground-truth boxes followed by `count_neg`
/// random background boxes inside an `image_h × image_w` image.
///
/// Positives cycle through the annotations in order and keep IoU ≥
/// `positive_iou` with their source; negatives keep IoU < `negative_iou`
/// with every annotation. When no valid negative is found within
/// `max_attempts` draws, fewer negatives are returned with a warning.
pub fn sample_proposals(
    annotations: &[PedAnnotation],
    image_size: (usize, usize),
    count_pos: usize,
    count_neg: usize,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<SampledProposals> {
    if count_pos > 0 && annotations.is_empty() {
        return Err(Error::contract(
            "sample_proposals",
            "positives requested but no annotations given",
        ));
    }
    if !(0.0..1.0).contains(&cfg.jitter) {
        return Err(Error::contract(
            "sample_proposals",
            format!("jitter {} outside [0, 1)", cfg.jitter),
        ));
    }
    let (img_h, img_w) = (image_size.0 as f64, image_size.1 as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SampledProposals::default();

    for k in 0..count_pos {
        let idx = k % annotations.len();
        let gt = annotations[idx].full_box;
        let mut chosen = gt;
        if cfg.jitter > 0.0 {
            for _ in 0..cfg.max_attempts {
                let j = cfg.jitter;
                let (cx, cy) = gt.center();
                let cand = BBox::from_center(
                    cx + rng.gen_range(-j..=j) * gt.w,
                    cy + rng.gen_range(-j..=j) * gt.h,
                    gt.w * (1.0 + rng.gen_range(-j..=j)),
                    gt.h * (1.0 + rng.gen_range(-j..=j)),
                )?;
                if iou(&cand, &gt) >= cfg.positive_iou {
                    chosen = cand;
                    break;
                }
            }
        }
        out.proposals.push(Proposal {
            bbox: chosen,
            label: Label::Positive,
            regression_target: Some(encode_deltas(&chosen, &gt)?),
            matched_annotation: Some(idx),
        });
    }

    let lo_h = cfg.negative_min_height.min(img_h);
    let hi_h = cfg.negative_max_height.min(img_h).max(lo_h);
    let mut missing = 0;
    for _ in 0..count_neg {
        let mut found = None;
        for _ in 0..cfg.max_attempts {
            let h = if hi_h > lo_h { rng.gen_range(lo_h..hi_h) } else { lo_h };
            let w = (h * cfg.aspect).min(img_w);
            let x = rng.gen_range(0.0..=(img_w - w));
            let y = rng.gen_range(0.0..=(img_h - h));
            let cand = BBox::new(x, y, w, h)?;
            if annotations
                .iter()
                .all(|a| iou(&cand, &a.full_box) < cfg.negative_iou)
            {
                found = Some(cand);
                break;
            }
        }
        match found {
            Some(bbox) => out.proposals.push(Proposal {
                bbox,
                label: Label::Negative,
                regression_target: None,
                matched_annotation: None,
            }),
            None => missing += 1,
        }
    }
    if missing > 0 {
        let msg = format!(
            "returned {} of {count_neg} negatives after {} attempts each",
            count_neg - missing,
            cfg.max_attempts
        );
        log::warn!("{msg}");
        out.warnings.push(msg);
    }
    Ok(out)
}

/// Exhaustive test-time proposals: boxes of the given heights and fixed
/// aspect tiled over the image with a step of `step_frac × height`.
pub fn grid_proposals(
    image_size: (usize, usize),
    heights: &[f64],
    aspect: f64,
    step_frac: f64,
) -> Result<Vec<BBox>> {
    if step_frac <= 0.0 || aspect <= 0.0 {
        return Err(Error::contract(
            "grid_proposals",
            "aspect and step must be positive",
        ));
    }
    let (img_h, img_w) = (image_size.0 as f64, image_size.1 as f64);
    let mut out = Vec::new();
    for &h in heights {
        let w = h * aspect;
        if h > img_h || w > img_w {
            continue;
        }
        let step_y = (h * step_frac).max(1.0);
        let step_x = (w * step_frac).max(1.0);
        let ny = ((img_h - h) / step_y).floor() as usize;
        let nx = ((img_w - w) / step_x).floor() as usize;
        // Center the lattice so both image edges get equal slack.
        let oy = 0.5 * (img_h - h - ny as f64 * step_y);
        let ox = 0.5 * (img_w - w - nx as f64 * step_x);
        for iy in 0..=ny {
            for ix in 0..=nx {
                out.push(BBox::new(ox + ix as f64 * step_x, oy + iy as f64 * step_y, w, h)?);
            }
        }
    }
    Ok(out)
}
