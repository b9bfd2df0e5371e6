//! Miss rate versus false positives per image, and its log-average.
//!
//! Annotations outside a subset's visibility/height bounds become ignore
//! regions: detections landing on them count neither as true nor as false
//! positives.

mod plot;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detector::{iou, Detection};
use crate::error::{Error, Result};
use crate::mga::PedAnnotation;

pub use plot::{write_curves_csv, write_curves_svg};

/// Miss rates are floored here before taking logs.
pub const MISS_RATE_FLOOR: f64 = 1e-4;
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

/// Visibility interval `(min_visibility, max_visibility]` and height bound
/// `height > min_height` of an evaluation subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub name: String,
    pub min_visibility: f64,
    pub max_visibility: f64,
    pub min_height: f64,
}

impl SubsetSpec {
    pub fn reasonable() -> Self {
        Self::new("R", 0.65, 1.0)
    }

    pub fn heavy_occlusion() -> Self {
        Self::new("HO", 0.20, 0.65)
    }

    pub fn reasonable_heavy() -> Self {
        Self::new("R+HO", 0.20, 1.0)
    }

    fn new(name: &str, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            min_visibility: lo,
            max_visibility: hi,
            min_height: 50.0,
        }
    }

    pub fn standard() -> Vec<Self> {
        vec![Self::reasonable(), Self::heavy_occlusion(), Self::reasonable_heavy()]
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::standard()
            .into_iter()
            .find(|s| s.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Evaluation(format!("unknown subset {name:?}; expected R, HO or R+HO")))
    }

    pub fn contains(&self, a: &PedAnnotation) -> bool {
        let v = a.visibility_ratio();
        v > self.min_visibility && v <= self.max_visibility && a.height() > self.min_height
    }
}

/// Splits annotations into (evaluated, ignored) for `subset`.
pub fn filter_subset(
    annotations: &[PedAnnotation],
    subset: &SubsetSpec,
) -> (Vec<PedAnnotation>, Vec<PedAnnotation>) {
    annotations.iter().cloned().partition(|a| subset.contains(a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchLabel {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Outcome of matching one image's detections.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub labels: Vec<MatchLabel>,
    /// Per evaluated annotation: whether some detection claimed it.
    pub matched: Vec<bool>,
}

impl MatchResult {
    pub fn missed(&self) -> usize {
        self.matched.iter().filter(|m| !**m).count()
    }

    pub fn false_positives(&self) -> usize {
        self.labels.iter().filter(|l| **l == MatchLabel::FalsePositive).count()
    }
}

/// Greedy matching of one image's detections by descending score.
///
/// A detection claims the unmatched evaluated annotation of highest IoU at
/// or above `iou_threshold`; otherwise it is ignored if it reaches the
/// threshold against any ignored annotation, and a false positive if not.
pub fn match_detections(
    detections: &[Detection],
    evaluated: &[PedAnnotation],
    ignored: &[PedAnnotation],
    iou_threshold: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut labels = vec![MatchLabel::FalsePositive; detections.len()];
    let mut matched = vec![false; evaluated.len()];
    for i in order {
        let d = &detections[i].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (j, a) in evaluated.iter().enumerate() {
            if matched[j] {
                continue;
            }
            let o = iou(d, &a.full_box);
            if o >= iou_threshold && best.map_or(true, |(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        labels[i] = if let Some((j, _)) = best {
            matched[j] = true;
            MatchLabel::TruePositive
        } else if ignored.iter().any(|a| iou(d, &a.full_box) >= iou_threshold) {
            MatchLabel::Ignored
        } else {
            MatchLabel::FalsePositive
        };
    }
    MatchResult { labels, matched }
}

/// One operating point of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
}

/// Operating points ordered by decreasing score threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub points: Vec<CurvePoint>,
    pub lamr: f64,
}

/// Sweeps the score threshold over every distinct detection score.
///
/// `scored` holds `(score, label)` for all detections of all images;
/// `total_evaluated` counts evaluated annotations across images. Without
/// any detection the curve is the single point `(0, 1)`.
pub fn fppi_curve(
    scored: &[(f64, MatchLabel)],
    total_evaluated: usize,
    num_images: usize,
    subset_name: &str,
) -> Result<EvalCurve> {
    if num_images == 0 {
        return Err(Error::Evaluation("no images to evaluate".into()));
    }
    if total_evaluated == 0 {
        return Err(Error::Evaluation(format!(
            "subset {subset_name} has no evaluated annotations; miss rate undefined"
        )));
    }
    let mut sorted: Vec<(f64, MatchLabel)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n, m) = (num_images as f64, total_evaluated as f64);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            match sorted[i].1 {
                MatchLabel::TruePositive => tp += 1,
                MatchLabel::FalsePositive => fp += 1,
                MatchLabel::Ignored => {}
            }
            i += 1;
        }
        points.push(CurvePoint {
            threshold,
            fppi: fp as f64 / n,
            miss_rate: (m - tp as f64) / m,
        });
    }
    if points.is_empty() {
        points.push(CurvePoint {
            threshold: f64::INFINITY,
            fppi: 0.0,
            miss_rate: 1.0,
        });
    }
    let mut curve = EvalCurve { points, lamr: 0.0 };
    curve.lamr = log_average_miss_rate(&curve)?;
    Ok(curve)
}

/// The nine reference FPPI values `10^(-2 + k/4)`, `k = 0..=8`.
pub fn reference_fppi() -> [f64; 9] {
    std::array::from_fn(|k| 10f64.powf(-2.0 + k as f64 * 0.25))
}

/// Geometric mean of the floored miss rates sampled at [`reference_fppi`].
/// Each reference takes the last point (in threshold order) whose FPPI does
/// not exceed it, or the first point when none does.
pub fn log_average_miss_rate(curve: &EvalCurve) -> Result<f64> {
    let Some(first) = curve.points.first() else {
        return Err(Error::Evaluation("empty curve".into()));
    };
    let sampled = reference_fppi().map(|r| {
        curve
            .points
            .iter()
            .rev()
            .find(|p| p.fppi <= r)
            .unwrap_or(first)
            .miss_rate
            .max(MISS_RATE_FLOOR)
    });
    // A constant sample is its own geometric mean; skip the exp/ln rounding.
    if sampled.iter().all(|&v| v == sampled[0]) {
        return Ok(sampled[0]);
    }
    let log_sum: f64 = sampled.iter().map(|v| v.ln()).sum();
    Ok((log_sum / sampled.len() as f64).exp())
}

/// Per-subset outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub subset: SubsetSpec,
    pub num_evaluated: usize,
    pub num_ignored: usize,
    pub lamr: f64,
    pub curve: Vec<CurvePoint>,
}

/// Evaluates detections against per-image ground truth on one subset.
/// Every image in `ground_truth` counts toward FPPI, with or without
/// annotations.
pub fn evaluate_subset(
    detections: &[Detection],
    ground_truth: &BTreeMap<String, Vec<PedAnnotation>>,
    subset: &SubsetSpec,
    iou_threshold: f64,
) -> Result<SubsetResult> {
    let mut per_image: BTreeMap<&str, Vec<Detection>> =
        ground_truth.keys().map(|k| (k.as_str(), Vec::new())).collect();
    for d in detections {
        match per_image.get_mut(d.image_id.as_str()) {
            Some(v) => v.push(d.clone()),
            None => {
                return Err(Error::Evaluation(format!(
                    "detection for unknown image {:?}",
                    d.image_id
                )))
            }
        }
    }
    let mut scored = Vec::with_capacity(detections.len());
    let (mut n_eval, mut n_ign) = (0, 0);
    for (id, dets) in &per_image {
        let (evaluated, ignored) = filter_subset(&ground_truth[*id], subset);
        n_eval += evaluated.len();
        n_ign += ignored.len();
        let m = match_detections(dets, &evaluated, &ignored, iou_threshold);
        scored.extend(dets.iter().map(|d| d.score).zip(m.labels));
    }
    let curve = fppi_curve(&scored, n_eval, ground_truth.len(), &subset.name)?;
    Ok(SubsetResult {
        subset: subset.clone(),
        num_evaluated: n_eval,
        num_ignored: n_ign,
        lamr: curve.lamr,
        curve: curve.points,
    })
}

/// Ground truth keyed by image id; images without annotations included.
pub fn ground_truth(scenes: &[crate::synth::Scene]) -> BTreeMap<String, Vec<PedAnnotation>> {
    scenes
        .iter()
        .map(|s| (s.image_id.clone(), s.annotations.clone()))
        .collect()
}

/// Contents of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub iou_threshold: f64,
    pub subsets: Vec<SubsetResult>,
}

impl EvalReport {
    pub fn lamr(&self, name: &str) -> Option<f64> {
        self.subsets.iter().find(|s| s.subset.name == name).map(|s| s.lamr)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

pub fn evaluate(
    detections: &[Detection],
    ground_truth: &BTreeMap<String, Vec<PedAnnotation>>,
    subsets: &[SubsetSpec],
    iou_threshold: f64,
) -> Result<EvalReport> {
    let subsets = subsets
        .iter()
        .map(|s| evaluate_subset(detections, ground_truth, s, iou_threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        num_images: ground_truth.len(),
        iou_threshold,
        subsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BBox;

    fn ann(vis: f64, height: f64) -> PedAnnotation {
        let full = BBox::new(0.0, 0.0, 10.0, height).unwrap();
        let visible = BBox::new(0.0, 0.0, 10.0, height * vis).unwrap();
        PedAnnotation::new(full, visible, "img").unwrap()
    }

    fn det(x: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, 10.0, 60.0).unwrap(),
            score,
            image_id: "img".into(),
        }
    }

    #[test]
    fn subset_membership() {
        let (r, ho, rho) = (
            SubsetSpec::reasonable(),
            SubsetSpec::heavy_occlusion(),
            SubsetSpec::reasonable_heavy(),
        );
        let a = ann(0.7, 60.0);
        assert!(r.contains(&a) && !ho.contains(&a) && rho.contains(&a));
        let b = ann(0.5, 60.0);
        assert!(!r.contains(&b) && ho.contains(&b) && rho.contains(&b));
        for v in [0.3, 0.5, 0.9, 1.0] {
            let c = ann(v, 40.0);
            assert!(!r.contains(&c) && !ho.contains(&c) && !rho.contains(&c));
        }
    }

    #[test]
    fn exact_match_is_true_positive() {
        let gt = vec![ann(1.0, 60.0)];
        let m = match_detections(&[det(0.0, 0.7)], &gt, &[], 0.5);
        assert_eq!(m.labels, vec![MatchLabel::TruePositive]);
        assert_eq!((m.false_positives(), m.missed()), (0, 0));
        let none = match_detections(&[], &gt, &[], 0.5);
        assert_eq!((none.false_positives(), none.missed()), (0, 1));
    }

    #[test]
    fn second_detection_on_same_object_is_false_positive() {
        // Shifted by 10/9 px: IoU = (10 - s) / (10 + s) = 0.8.
        let s = 10.0 / 9.0;
        let gt = vec![ann(1.0, 60.0)];
        assert!((iou(&det(s, 0.0).bbox, &gt[0].full_box) - 0.8).abs() < 1e-12);
        let m = match_detections(&[det(s, 0.8), det(s, 0.9)], &gt, &[], 0.5);
        assert_eq!(m.labels, vec![MatchLabel::FalsePositive, MatchLabel::TruePositive]);
    }

    #[test]
    fn detection_on_ignored_box_is_ignored() {
        let ign = vec![ann(0.1, 60.0)];
        let m = match_detections(&[det(0.0, 0.9), det(0.0, 0.8)], &[], &ign, 0.5);
        assert_eq!(m.labels, vec![MatchLabel::Ignored; 2]);
    }

    #[test]
    fn curve_examples() {
        let perfect = fppi_curve(&[(1.0, MatchLabel::TruePositive)], 1, 1, "R").unwrap();
        assert_eq!(perfect.points.len(), 1);
        assert_eq!((perfect.points[0].fppi, perfect.points[0].miss_rate), (0.0, 0.0));
        assert_eq!(perfect.lamr, MISS_RATE_FLOOR);

        let empty = fppi_curve(&[], 3, 2, "R").unwrap();
        assert!(empty.points.iter().all(|p| p.miss_rate == 1.0));
        assert_eq!(empty.lamr, 1.0);

        let c = fppi_curve(
            &[(0.9, MatchLabel::TruePositive), (0.8, MatchLabel::FalsePositive)],
            2,
            2,
            "R",
        )
        .unwrap();
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.fppi, p.miss_rate)).collect();
        assert_eq!(pts, vec![(0.0, 0.5), (0.5, 0.5)]);

        let err = fppi_curve(&[], 0, 2, "HO").unwrap_err().to_string();
        assert!(err.contains("HO"), "{err}");
    }

    fn curve(points: &[(f64, f64)]) -> EvalCurve {
        EvalCurve {
            points: points
                .iter()
                .enumerate()
                .map(|(i, &(fppi, miss_rate))| CurvePoint {
                    threshold: -(i as f64),
                    fppi,
                    miss_rate,
                })
                .collect(),
            lamr: 0.0,
        }
    }

    #[test]
    fn lamr_examples() {
        let flat = curve(&[(0.0, 0.5), (0.3, 0.5), (2.0, 0.5)]);
        assert!((log_average_miss_rate(&flat).unwrap() - 0.5).abs() < 1e-12);
        let zero = curve(&[(0.0, 0.0), (5.0, 0.0)]);
        assert!((log_average_miss_rate(&zero).unwrap() - 1e-4).abs() < 1e-16);

        // 0.8 below FPPI 0.1, 0.4 from 0.1 on. References 10^-2 .. 10^-1.25
        // (four of them) see 0.8; 10^-1 onward (five) see 0.4.
        let step = curve(&[(0.0, 0.8), (0.05, 0.8), (0.1, 0.4), (1.0, 0.4)]);
        let expected = ((4.0 * 0.8f64.ln() + 5.0 * 0.4f64.ln()) / 9.0).exp();
        assert!((log_average_miss_rate(&step).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn references_span_two_decades() {
        let r = reference_fppi();
        assert!((r[0] - 0.01).abs() < 1e-15 && (r[8] - 1.0).abs() < 1e-15);
        assert!((r[4] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn report_lookup_and_unknown_image() {
        let mut gt = BTreeMap::new();
        gt.insert("img".to_string(), vec![ann(1.0, 60.0)]);
        let rep = evaluate(&[det(0.0, 0.9)], &gt, &[SubsetSpec::reasonable()], 0.5).unwrap();
        assert_eq!(rep.lamr("R"), Some(MISS_RATE_FLOOR));
        let mut stray = det(0.0, 0.9);
        stray.image_id = "other".into();
        assert!(evaluate(&[stray], &gt, &[SubsetSpec::reasonable()], 0.5).is_err());
    }
}
