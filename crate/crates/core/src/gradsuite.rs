//! Finite-difference checks of every differentiable op and loss on small
//! random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ModelConfig, RunConfig};
use crate::detector::network::{backbone_forward, detection_head_forward, init_backbone, init_head};
use crate::detector::{roi_align_graph, BBox, Label, RoiAlignConfig};
use crate::error::Result;
use crate::losses::{bce_graph, smooth_l1_graph};
use crate::mga::{init_mga, mga_forward_graph, modulate_graph, occlusion_weight, CoarseMask};
use crate::model::Mgan;
use crate::tensor::{finite_diff_check, Bindings, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::train::{batch_loss, ImageTargets};

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_TRIALS: usize = 20;

/// Result of all trials of one case.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Case = fn(&mut ChaCha8Rng) -> Result<GradCheckReport>;

/// Every checked case, in report order.
pub const CASES: &[(&str, Case)] = &[
    ("conv2d", conv2d_case),
    ("fully_connected", fc_case),
    ("relu", relu_case),
    ("sigmoid", sigmoid_case),
    ("add", add_case),
    ("mul_broadcast", mul_case),
    ("reshape_sum", reshape_case),
    ("roi_align", roi_align_case),
    ("backbone", backbone_case),
    ("detection_head", head_case),
    ("mga_branch", mga_case),
    ("modulation", modulation_case),
    ("rcnn_cls_ce", cls_case),
    ("rcnn_reg_smooth_l1", smooth_l1_case),
    ("mask_bce", mask_case),
    ("occlusion_ce", occ_case),
    ("total_loss", total_case),
];

/// Runs `trials` random instances of every case. Trial `t` of case `i`
/// draws from a stream keyed by `(seed, i, t)`.
pub fn run_gradient_suite(trials: usize, seed: u64) -> Result<Vec<GradCheckEntry>> {
    CASES
        .iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut worst: f64 = 0.0;
            let mut passed = true;
            for t in 0..trials {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 32) ^ t as u64);
                let report = case(&mut rng)?;
                worst = worst.max(report.max_rel_error());
                passed &= report.passed();
            }
            Ok(GradCheckEntry {
                name,
                trials,
                max_rel_error: worst,
                passed,
            })
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so ReLU kinks stay outside the step.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ c ⊙ x` with fixed random `c`, so every output element gets its own
/// upstream gradient.
fn project(g: &mut Graph, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = uniform(rng, &shape, -1.0, 1.0);
    let c = g.constant(&c);
    let y = g.mul(x, c)?;
    Ok(g.sum(y))
}

fn check<F>(params: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_diff_check(f, params, GRADCHECK_STEP, GRADCHECK_TOLERANCE)
}

/// Checks `f` over every tensor of `store`, bound by name.
fn check_store<F>(store: &ParamStore, extra: &[Tensor], mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &Bindings, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut tensors: Vec<Tensor> = extra.to_vec();
    tensors.extend(store.iter().map(|(_, t)| t.clone()));
    let k = extra.len();
    check(&tensors, |g, v| {
        let b: Bindings = names.iter().cloned().zip(v[k..].iter().copied()).collect();
        f(g, &b, &v[..k])
    })
}

fn conv2d_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let n = rng.gen_range(1..=2);
    let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
    let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let k = if rng.gen_bool(0.5) { 1 } else { 3 };
    let stride = rng.gen_range(1..=2);
    let pad = if k == 3 { rng.gen_range(0..=1) } else { 0 };
    let x = uniform(rng, &[n, h, w, cin], -1.0, 1.0);
    let wt = uniform(rng, &[k, k, cin, cout], -1.0, 1.0);
    let b = uniform(rng, &[cout], -0.5, 0.5);
    let r = rng.clone();
    check(&[x, wt, b], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
        project(g, y, &mut r.clone())
    })
}

fn fc_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n, d, m) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=5));
    let x = uniform(rng, &[n, d], -1.0, 1.0);
    let wt = uniform(rng, &[d, m], -1.0, 1.0);
    let b = uniform(rng, &[m], -0.5, 0.5);
    let r = rng.clone();
    check(&[x, wt, b], |g, v| {
        let y = g.fully_connected(v[0], v[1], v[2])?;
        project(g, y, &mut r.clone())
    })
}

fn relu_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let n = rng.gen_range(1..=12);
    let x = off_zero(rng, &[n]);
    let r = rng.clone();
    check(&[x], |g, v| {
        let y = g.relu(v[0]);
        project(g, y, &mut r.clone())
    })
}

fn sigmoid_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let n = rng.gen_range(1..=12);
    let x = uniform(rng, &[n], -4.0, 4.0);
    let r = rng.clone();
    check(&[x], |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, &mut r.clone())
    })
}

fn add_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4)];
    let a = uniform(rng, &shape, -1.0, 1.0);
    let b = uniform(rng, &shape, -1.0, 1.0);
    let r = rng.clone();
    check(&[a, b], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, &mut r.clone())
    })
}

fn mul_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n, h, w, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=4));
    let a = uniform(rng, &[n, h, w, c], -1.0, 1.0);
    let b = uniform(rng, &[n, h, w, 1], -1.0, 1.0);
    let r = rng.clone();
    check(&[a, b], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, &mut r.clone())
    })
}

fn reshape_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (a, b) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let x = uniform(rng, &[a, b], -1.0, 1.0);
    let r = rng.clone();
    check(&[x], |g, v| {
        let y = g.reshape(v[0], vec![b, a])?;
        let s = project(g, y, &mut r.clone())?;
        let t = g.mul(s, s)?;
        Ok(g.sum(t))
    })
}

fn random_box(rng: &mut ChaCha8Rng, img_h: f64, img_w: f64) -> BBox {
    let h = rng.gen_range(4.0..img_h * 0.9);
    let w = rng.gen_range(3.0..img_w * 0.9);
    let x = rng.gen_range(-2.0..img_w - w + 2.0);
    let y = rng.gen_range(-2.0..img_h - h + 2.0);
    BBox::new(x, y, w, h).expect("positive size")
}

fn roi_align_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (fh, fw, c) = (rng.gen_range(2..=5), rng.gen_range(2..=5), rng.gen_range(1..=3));
    let cfg = RoiAlignConfig {
        stride: 4,
        out_h: rng.gen_range(1..=4),
        out_w: rng.gen_range(1..=4),
        sampling: rng.gen_range(1..=2),
    };
    let boxes: Vec<BBox> = (0..rng.gen_range(1..=3))
        .map(|_| random_box(rng, (fh * 4) as f64, (fw * 4) as f64))
        .collect();
    let fmap = uniform(rng, &[fh, fw, c], -1.0, 1.0);
    let r = rng.clone();
    check(&[fmap], |g, v| {
        let (y, _) = roi_align_graph(g, v[0], &boxes, &cfg)?;
        project(g, y, &mut r.clone())
    })
}

fn backbone_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let channels = rng.gen_range(1..=3);
    let mut store = ParamStore::new();
    init_backbone(&mut store, channels, rng);
    randomize_biases(&mut store, rng);
    let (h, w) = (8 * rng.gen_range(1..=2), 8 * rng.gen_range(1..=2));
    let image = uniform(rng, &[h, w, 3], 0.0, 1.0);
    let r = rng.clone();
    check_store(&store, &[image], |g, b, x| {
        let y = backbone_forward(g, b, x[0], channels)?;
        project(g, y, &mut r.clone())
    })
}

/// Non-zero biases so gradients through them are exercised.
fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (name, t) in store.iter_mut() {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
}

fn head_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n, s, c, fc) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(2..=5));
    let mut store = ParamStore::new();
    init_head(&mut store, s * s * c, fc, rng);
    randomize_biases(&mut store, rng);
    let feats = uniform(rng, &[n, s, s, c], 0.0, 1.0);
    let r = rng.clone();
    check_store(&store, &[feats], |g, b, x| {
        let out = detection_head_forward(g, b, x[0])?;
        let a = project(g, out.score, &mut r.clone())?;
        let d = project(g, out.deltas, &mut r.clone())?;
        g.add(a, d)
    })
}

fn mga_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n, s, c) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=3));
    let mut store = ParamStore::new();
    init_mga(&mut store, c, rng);
    randomize_biases(&mut store, rng);
    let feats = uniform(rng, &[n, s, s, c], 0.0, 1.0);
    let r = rng.clone();
    check_store(&store, &[feats], |g, b, x| {
        let m = mga_forward_graph(g, b, x[0])?;
        project(g, m, &mut r.clone())
    })
}

fn modulation_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n, s, c) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let feats = uniform(rng, &[n, s, s, c], -1.0, 1.0);
    let map = uniform(rng, &[n, s, s, 1], 0.0, 1.0);
    let r = rng.clone();
    check(&[feats, map], |g, v| {
        let y = modulate_graph(g, v[0], v[1])?;
        project(g, y, &mut r.clone())
    })
}

fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect()
}

fn cls_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let n = rng.gen_range(1..=8);
    let logits = uniform(rng, &[n, 1], -3.0, 3.0);
    let targets = binary(rng, n);
    check(&[logits], |g, v| {
        let p = g.sigmoid(v[0]);
        Ok(bce_graph(g, p, &targets, &vec![1.0; n], n as f64)?.0)
    })
}

fn smooth_l1_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let n = rng.gen_range(1..=5);
    let pred = uniform(rng, &[n, 4], -2.0, 2.0);
    // Keep every difference away from the |d| = 1 switch.
    let targets: Vec<[f64; 4]> = (0..n)
        .map(|i| {
            std::array::from_fn(|k| {
                let p = pred.data()[4 * i + k];
                let mut t = rng.gen_range(-2.0..2.0);
                while ((p - t).abs() - 1.0).abs() < 1e-3 {
                    t = rng.gen_range(-2.0..2.0);
                }
                t
            })
        })
        .collect();
    let weights = binary(rng, n);
    let denom = weights.iter().sum::<f64>().max(1.0);
    check(&[pred], |g, v| smooth_l1_graph(g, v[0], &targets, &weights, denom))
}

fn random_mask(rng: &mut ChaCha8Rng, s: usize) -> CoarseMask {
    CoarseMask {
        h: s,
        w: s,
        values: (0..s * s).map(|_| if rng.gen_bool(0.6) { 1.0 } else { 0.0 }).collect(),
    }
}

fn mask_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n, s) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
    let logits = uniform(rng, &[n, s, s, 1], -3.0, 3.0);
    let pos = binary(rng, n);
    let n_pos = pos.iter().sum::<f64>().max(1.0);
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for &p in &pos {
        targets.extend(random_mask(rng, s).values);
        weights.extend(std::iter::repeat(p).take(s * s));
    }
    check(&[logits], |g, v| {
        let p = g.sigmoid(v[0]);
        Ok(bce_graph(g, p, &targets, &weights, n_pos * (s * s) as f64)?.0)
    })
}

fn occ_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let n = rng.gen_range(1..=6);
    let logits = uniform(rng, &[n, 1], -3.0, 3.0);
    let weights = (0..n)
        .map(|_| occlusion_weight(&random_mask(rng, 3)))
        .collect::<Result<Vec<_>>>()?;
    check(&[logits], |g, v| {
        let p = g.sigmoid(v[0]);
        Ok(bce_graph(g, p, &vec![1.0; n], &weights, n as f64)?.0)
    })
}

fn total_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        channels: 2,
        fc_width: 4,
        roi_size: 3,
        roi_sampling: 1,
        rpn_emulation: rng.gen_bool(0.5),
        ..Default::default()
    };
    let model = Mgan::new(cfg.model.clone(), true, rng.gen());
    let mut store = model.params.clone();
    randomize_biases(&mut store, rng);
    let images: Vec<Tensor> = (0..2).map(|_| uniform(rng, &[16, 16, 3], 0.0, 1.0)).collect();
    let targets: Vec<ImageTargets> = (0..2)
        .map(|_| {
            let n = rng.gen_range(2..=4);
            let labels: Vec<Label> = (0..n)
                .map(|i| if i == 0 || rng.gen_bool(0.4) { Label::Positive } else { Label::Negative })
                .collect();
            ImageTargets {
                proposals: (0..n).map(|_| random_box(rng, 16.0, 16.0)).collect(),
                reg_targets: labels
                    .iter()
                    .map(|l| match l {
                        Label::Positive => std::array::from_fn(|_| rng.gen_range(-0.5..0.5)),
                        Label::Negative => [0.0; 4],
                    })
                    .collect(),
                masks: labels
                    .iter()
                    .map(|l| match l {
                        Label::Positive => random_mask(rng, 3),
                        Label::Negative => CoarseMask::filled(3, 3, 0.0),
                    })
                    .collect(),
                labels,
                warnings: Vec::new(),
            }
        })
        .collect();
    let batch: Vec<(&Tensor, &ImageTargets)> = images.iter().zip(&targets).collect();
    check_store(&store, &[], |g, b, _| Ok(batch_loss(&model, g, b, &batch, &cfg)?.0))
}
