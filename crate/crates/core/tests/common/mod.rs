//! Independent oracles and random case generators shared by the
//! integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use mgan_core::detector::{BBox, Detection};
use mgan_core::eval::{SubsetSpec, MISS_RATE_FLOOR};
use mgan_core::mga::PedAnnotation;
use rand::Rng;

/// Cell `(r, c)` is 1 iff its center is inside the visible box.
pub fn coarse_mask_oracle(p: &BBox, v: &BBox, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let cx = p.x + (c as f64 + 0.5) * p.w / w as f64;
            let cy = p.y + (r as f64 + 0.5) * p.h / h as f64;
            let inside = cx >= v.x && cx < v.x + v.w && cy >= v.y && cy < v.y + v.h;
            out.push(if inside { 1.0 } else { 0.0 });
        }
    }
    out
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64) -> BBox {
    let w = rng.gen_range(0.5..extent);
    let h = rng.gen_range(0.5..extent);
    BBox::new(rng.gen_range(-extent..extent), rng.gen_range(-extent..extent), w, h).unwrap()
}

/// A random ground-truth/detection set on a coarse lattice, so overlaps,
/// exact matches and score ties are common.
pub struct EvalCase {
    pub detections: Vec<Detection>,
    pub ground_truth: BTreeMap<String, Vec<PedAnnotation>>,
}

fn lattice_box<R: Rng>(rng: &mut R) -> BBox {
    let h = [40.0, 52.0, 60.0, 80.0][rng.gen_range(0..4)];
    BBox::new(rng.gen_range(0..6) as f64 * 6.0, rng.gen_range(0..3) as f64 * 8.0, h * 0.41, h).unwrap()
}

pub fn random_eval_case<R: Rng>(rng: &mut R) -> EvalCase {
    let n_images = rng.gen_range(1..=5);
    let ids: Vec<String> = (0..n_images).map(|i| format!("img{i}")).collect();
    let mut ground_truth = BTreeMap::new();
    for id in &ids {
        let anns = (0..rng.gen_range(0..=3))
            .map(|_| {
                let full = lattice_box(rng);
                let vis = [0.1, 0.3, 0.5, 0.65, 0.8, 1.0][rng.gen_range(0..6)];
                let visible = BBox::new(full.x, full.y, full.w, full.h * vis).unwrap();
                PedAnnotation::new(full, visible, id.clone()).unwrap()
            })
            .collect::<Vec<_>>();
        ground_truth.insert(id.clone(), anns);
    }
    let detections = (0..rng.gen_range(0..=10))
        .map(|_| {
            let id = ids[rng.gen_range(0..n_images)].clone();
            let anns = &ground_truth[&id];
            let bbox = if !anns.is_empty() && rng.gen_bool(0.6) {
                let a: &PedAnnotation = &anns[rng.gen_range(0..anns.len())];
                let s = rng.gen_range(-4..=4) as f64 * 2.0;
                BBox::new(a.full_box.x + s, a.full_box.y, a.full_box.w, a.full_box.h).unwrap()
            } else {
                lattice_box(rng)
            };
            Detection {
                bbox,
                score: rng.gen_range(0..6) as f64 / 5.0,
                image_id: id,
            }
        })
        .collect();
    EvalCase {
        detections,
        ground_truth,
    }
}

fn corners_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

fn in_subset(a: &PedAnnotation, s: &SubsetSpec) -> bool {
    let v = (a.visible_box.w * a.visible_box.h) / (a.full_box.w * a.full_box.h);
    v > s.min_visibility && v <= s.max_visibility && a.full_box.h > s.min_height
}

/// Exhaustive evaluator: for every distinct score threshold it re-runs the
/// matching on the detections at or above it, then samples the nine
/// references as the lowest miss rate among points within each FPPI budget.
/// `None` when the subset has no evaluated annotation.
pub fn brute_force_lamr(case: &EvalCase, subset: &SubsetSpec, iou_thr: f64) -> Option<f64> {
    let total: usize = case
        .ground_truth
        .values()
        .flatten()
        .filter(|a| in_subset(a, subset))
        .count();
    if total == 0 {
        return None;
    }
    let n_images = case.ground_truth.len() as f64;
    let mut thresholds: Vec<f64> = case.detections.iter().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let mut points: Vec<(f64, f64)> = Vec::new();
    for &t in &thresholds {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (id, anns) in &case.ground_truth {
            let mut kept: Vec<(usize, &Detection)> = case
                .detections
                .iter()
                .enumerate()
                .filter(|(_, d)| &d.image_id == id && d.score >= t)
                .collect();
            // Highest score first; equal scores keep input order.
            kept.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
            let mut taken = vec![false; anns.len()];
            for (_, d) in kept {
                let mut best: Option<usize> = None;
                let mut best_iou = f64::NEG_INFINITY;
                for (j, a) in anns.iter().enumerate() {
                    if !in_subset(a, subset) || taken[j] {
                        continue;
                    }
                    let o = corners_iou(&d.bbox, &a.full_box);
                    if o >= iou_thr && o > best_iou {
                        best = Some(j);
                        best_iou = o;
                    }
                }
                if let Some(j) = best {
                    taken[j] = true;
                    tp += 1;
                } else if !anns
                    .iter()
                    .any(|a| !in_subset(a, subset) && corners_iou(&d.bbox, &a.full_box) >= iou_thr)
                {
                    fp += 1;
                }
            }
        }
        points.push((fp as f64 / n_images, 1.0 - tp as f64 / total as f64));
    }
    if points.is_empty() {
        points.push((0.0, 1.0));
    }
    let mut log_sum = 0.0;
    for k in 0..9 {
        let r = 10f64.powf(-2.0 + k as f64 * 0.25);
        let within: Vec<f64> = points.iter().filter(|p| p.0 <= r).map(|p| p.1).collect();
        let mr = if within.is_empty() {
            points[0].1
        } else {
            within.iter().cloned().fold(f64::INFINITY, f64::min)
        };
        log_sum += mr.max(MISS_RATE_FLOOR).ln();
    }
    Some((log_sum / 9.0).exp())
}
