//! Training: per-image targets, the composite loss on the graph, Adam, the
//! epoch loop with checkpoints, and the attention quality metric.
//!
//! Every source of randomness is derived from `(seed, epoch, image)`, so a
//! run resumed from an epoch checkpoint replays the same iterates as an
//! uninterrupted one.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{MaskMode, RunConfig};
use crate::detector::{encode_deltas, sample_proposals, BBox, Label};
use crate::error::{Error, Result};
use crate::losses::{bce_graph, smooth_l1_graph, total_loss, LossBreakdown, LossParts};
use crate::mga::{occlusion_weight, rasterize_coarse_mask, rasterize_dense_mask, CoarseMask, PedAnnotation};
use crate::model::Mgan;
use crate::synth::Scene;
use crate::tensor::{Checkpoint, Graph, ParamStore, Tensor, Var};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from the accumulated gradients of `params`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }

    fn put(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.meta.insert("adam.t".into(), self.t.to_string());
        for (prefix, map) in [("adam.m.", &self.m), ("adam.v.", &self.v)] {
            for (k, v) in map {
                ck.tensors
                    .insert(format!("{prefix}{k}"), Tensor::new(vec![v.len()], v.clone())?);
            }
        }
        Ok(())
    }

    fn take(&mut self, ck: &Checkpoint) -> Result<()> {
        self.t = ck
            .meta_value("adam.t")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad adam.t".into()))?;
        for (prefix, map) in [("adam.m.", &mut self.m), ("adam.v.", &mut self.v)] {
            map.clear();
            for (k, t) in &ck.tensors {
                if let Some(name) = k.strip_prefix(prefix) {
                    map.insert(name.to_string(), t.data().to_vec());
                }
            }
        }
        Ok(())
    }
}

/// Sampled proposals of one image with all their supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTargets {
    pub proposals: Vec<BBox>,
    pub labels: Vec<Label>,
    /// Normalized regression targets; zeros for negatives.
    pub reg_targets: Vec<[f64; 4]>,
    /// Mask targets; all-zero placeholders for negatives.
    pub masks: Vec<CoarseMask>,
    pub warnings: Vec<String>,
}

impl ImageTargets {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Positive).count()
    }
}

/// Mask target of a positive proposal.
pub fn mask_target(proposal: &BBox, ann: &PedAnnotation, mode: MaskMode, size: usize) -> Result<CoarseMask> {
    match mode {
        MaskMode::Coarse => rasterize_coarse_mask(proposal, &ann.visible_box, size, size),
        MaskMode::Dense => {
            let s = ann.silhouette.as_ref().ok_or_else(|| {
                Error::Training(format!(
                    "dense masks requested but an annotation of {} has no silhouette",
                    ann.image_id
                ))
            })?;
            rasterize_dense_mask(proposal, s, size, size)
        }
    }
}

/// Samples proposals for `scene` and builds their targets.
pub fn image_targets(scene: &Scene, cfg: &RunConfig, seed: u64) -> Result<ImageTargets> {
    let t = &cfg.train;
    let (h, w) = (scene.image.shape()[0], scene.image.shape()[1]);
    let eligible: Vec<PedAnnotation> = scene
        .annotations
        .iter()
        .filter(|a| a.visibility_ratio() >= t.positive_min_visibility && a.height() >= t.positive_min_height)
        .cloned()
        .collect();
    let n_pos = if eligible.is_empty() { 0 } else { t.positives_per_image };
    let pos = sample_proposals(&eligible, (h, w), n_pos, 0, seed, &t.sampler)?;
    let neg = sample_proposals(
        &scene.annotations,
        (h, w),
        0,
        t.negatives_per_image,
        seed ^ 0x5851_f42d_4c95_7f2d,
        &t.sampler,
    )?;
    let size = cfg.model.roi_size;
    let std = cfg.model.delta_std;
    let mut out = ImageTargets {
        proposals: Vec::new(),
        labels: Vec::new(),
        reg_targets: Vec::new(),
        masks: Vec::new(),
        warnings: neg.warnings,
    };
    for p in pos.proposals.iter().chain(&neg.proposals) {
        out.proposals.push(p.bbox);
        out.labels.push(p.label);
        match p.matched_annotation {
            Some(i) => {
                let ann = &eligible[i];
                let d = encode_deltas(&p.bbox, &ann.full_box)?;
                out.reg_targets.push(std::array::from_fn(|k| d[k] / std[k]));
                out.masks.push(mask_target(&p.bbox, ann, cfg.loss.mask_mode, size)?);
            }
            None => {
                out.reg_targets.push([0.0; 4]);
                out.masks.push(CoarseMask::filled(size, size, 0.0));
            }
        }
    }
    Ok(out)
}

/// Loss values of one batch plus counters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub breakdown: LossBreakdown,
    pub clamp_events: usize,
    /// Images of the batch without positive proposals.
    pub images_without_positives: usize,
}

struct ImageLoss {
    parts: LossParts,
    terms: Vec<(Var, f64)>,
    clamps: usize,
    empty: bool,
}

fn image_loss(
    model: &Mgan,
    g: &mut Graph,
    b: &crate::tensor::Bindings,
    image: &Tensor,
    targets: &ImageTargets,
    cfg: &RunConfig,
) -> Result<ImageLoss> {
    let img = g.constant(image);
    let f = model.forward(g, b, img, &targets.proposals)?;
    let n = targets.proposals.len();
    let pos: Vec<f64> = targets
        .labels
        .iter()
        .map(|l| if *l == Label::Positive { 1.0 } else { 0.0 })
        .collect();
    let n_pos = targets.num_positive();
    let ones = vec![1.0; n];
    let mut parts = LossParts::default();
    let mut terms = Vec::new();
    let mut clamps = 0;

    let (cls, c) = bce_graph(g, f.head.score, &pos, &ones, n as f64)?;
    parts.l_rcnn_cls = g.scalar(cls)?;
    clamps += c;
    terms.push((cls, 1.0));

    if let Some(rpn) = f.rpn {
        let (rc, c) = bce_graph(g, rpn.score, &pos, &ones, n as f64)?;
        parts.l_rpn_cls = g.scalar(rc)?;
        clamps += c;
        terms.push((rc, 1.0));
    }

    if n_pos > 0 {
        let denom = n_pos as f64;
        let reg = smooth_l1_graph(g, f.head.deltas, &targets.reg_targets, &pos, denom)?;
        parts.l_rcnn_reg = g.scalar(reg)?;
        terms.push((reg, 1.0));
        if let Some(rpn) = f.rpn {
            let rr = smooth_l1_graph(g, rpn.deltas, &targets.reg_targets, &pos, denom)?;
            parts.l_rpn_reg = g.scalar(rr)?;
            terms.push((rr, 1.0));
        }

        let occ_w: Vec<f64> = targets
            .masks
            .iter()
            .zip(&pos)
            .map(|(m, &p)| if p > 0.0 { occlusion_weight(m) } else { Ok(0.0) })
            .collect::<Result<_>>()?;
        let (occ, c) = bce_graph(g, f.head.score, &pos, &occ_w, denom)?;
        parts.l_occ = g.scalar(occ)?;
        clamps += c;
        terms.push((occ, cfg.loss.beta));

        if let Some(map) = f.attention {
            let cells = model.config.roi_size * model.config.roi_size;
            let mut mt = Vec::with_capacity(n * cells);
            let mut mw = Vec::with_capacity(n * cells);
            for (m, &p) in targets.masks.iter().zip(&pos) {
                mt.extend_from_slice(&m.values);
                mw.extend(std::iter::repeat(p).take(cells));
            }
            let (mask, c) = bce_graph(g, map, &mt, &mw, denom * cells as f64)?;
            parts.l_mask = g.scalar(mask)?;
            clamps += c;
            terms.push((mask, cfg.loss.alpha));
        }
    }
    Ok(ImageLoss {
        parts,
        terms,
        clamps,
        empty: n_pos == 0,
    })
}

/// Records the batch loss (mean over images) and returns its graph node.
pub fn batch_loss(
    model: &Mgan,
    g: &mut Graph,
    b: &crate::tensor::Bindings,
    batch: &[(&Tensor, &ImageTargets)],
    cfg: &RunConfig,
) -> Result<(Var, BatchStats)> {
    let k = batch.len() as f64;
    let mut terms = Vec::new();
    let mut parts = LossParts::default();
    let mut clamps = 0;
    let mut empty = 0;
    for (image, targets) in batch {
        let l = image_loss(model, g, b, image, targets, cfg)?;
        terms.extend(l.terms.into_iter().map(|(v, w)| (v, w / k)));
        parts.l_rpn_cls += l.parts.l_rpn_cls / k;
        parts.l_rpn_reg += l.parts.l_rpn_reg / k;
        parts.l_rcnn_cls += l.parts.l_rcnn_cls / k;
        parts.l_rcnn_reg += l.parts.l_rcnn_reg / k;
        parts.l_mask += l.parts.l_mask / k;
        parts.l_occ += l.parts.l_occ / k;
        clamps += l.clamps;
        empty += l.empty as usize;
    }
    let total = g.weighted_sum(&terms)?;
    let breakdown = total_loss(parts, cfg.loss.alpha, cfg.loss.beta)?;
    Ok((
        total,
        BatchStats {
            breakdown,
            clamp_events: clamps,
            images_without_positives: empty,
        },
    ))
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    pub batch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub clamp_events: usize,
    pub images_without_positives: usize,
}

/// Where a run writes, and optionally where it resumes from.
#[derive(Debug, Clone, Default)]
pub struct TrainIo {
    /// Run directory for the loss log, config echo and checkpoints. `None`
    /// keeps everything in memory.
    pub run_dir: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
    /// Stop after this many epochs of the schedule (for tests and resume).
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mgan,
    pub adam: Adam,
    /// Epochs completed.
    pub epoch: usize,
    pub log: Vec<LogRecord>,
    pub warnings: Vec<String>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the packed tuple.
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const CONFIG_ECHO: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

pub fn epoch_checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:03}.ckpt"))
}

/// Model, optimizer and progress in one checkpoint.
pub fn train_checkpoint(model: &Mgan, adam: &Adam, epoch: usize, seed: u64) -> Result<Checkpoint> {
    let mut ck = model.to_checkpoint();
    adam.put(&mut ck)?;
    ck.meta.insert("train.epoch".into(), epoch.to_string());
    ck.meta.insert("train.seed".into(), seed.to_string());
    Ok(ck)
}

/// Runs the configured schedule over `train_set`.
pub fn train(cfg: &RunConfig, train_set: &[Scene], io: &TrainIo) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    let mut model = Mgan::new(cfg.model.clone(), cfg.attention_enabled(), mix(cfg.seed, 0, 0));
    let mut adam = Adam::new(cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps);
    let mut start_epoch = 0;
    if let Some(path) = &io.resume_from {
        let ck = Checkpoint::load(path)?;
        model = Mgan::from_checkpoint(&ck)?;
        if model.attention != cfg.attention_enabled() || model.config != cfg.model_for_checkpoint() {
            return Err(Error::Checkpoint(format!(
                "{} was written with a different model configuration",
                path.display()
            )));
        }
        adam.take(&ck)?;
        start_epoch = ck
            .meta_value("train.epoch")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad train.epoch".into()))?;
    }

    let mut log_file = None;
    if let Some(dir) = &io.run_dir {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        let echo = dir.join(CONFIG_ECHO);
        std::fs::write(&echo, cfg.to_toml()).map_err(|e| Error::io(&echo, e))?;
        let path = dir.join(LOSS_LOG);
        let f = if start_epoch > 0 {
            std::fs::OpenOptions::new().append(true).create(true).open(&path)
        } else {
            std::fs::File::create(&path)
        }
        .map_err(|e| Error::io(&path, e))?;
        log_file = Some((path, std::io::BufWriter::new(f)));
    }

    let total_epochs = cfg.optim.total_epochs();
    let end_epoch = io.stop_after_epoch.map_or(total_epochs, |e| e.min(total_epochs));
    let mut log = Vec::new();
    let mut warnings = Vec::new();
    let bs = cfg.train.batch_size;

    for epoch in start_epoch..end_epoch {
        let lr = cfg.optim.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, epoch as u64)));
        for (bi, chunk) in order.chunks(bs).enumerate() {
            let targets = chunk
                .iter()
                .map(|&i| image_targets(&train_set[i], cfg, mix(cfg.seed, 2 + epoch as u64, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            for t in &targets {
                warnings.extend(t.warnings.iter().cloned());
            }
            let batch: Vec<(&Tensor, &ImageTargets)> =
                chunk.iter().map(|&i| &train_set[i].image).zip(&targets).collect();
            let mut g = Graph::new();
            let b = model.params.bind(&mut g);
            let (loss, stats) = batch_loss(&model, &mut g, &b, &batch, cfg)?;
            let bd = stats.breakdown;
            if !bd.total.is_finite() || !g.scalar(loss)?.is_finite() {
                let ids: Vec<&str> = chunk.iter().map(|&i| train_set[i].image_id.as_str()).collect();
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch} batch {bi} (images {ids:?}): {bd:?}"
                )));
            }
            g.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate_grads(&g, &b)?;
            adam.step(&mut model.params, lr);
            let rec = LogRecord {
                epoch,
                step: adam.t,
                batch: bi,
                lr,
                loss: bd,
                clamp_events: stats.clamp_events,
                images_without_positives: stats.images_without_positives,
            };
            if let Some((path, f)) = log_file.as_mut() {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            log.push(rec);
        }
        if let (Some(dir), true) = (&io.run_dir, cfg.train.checkpoint_every_epoch) {
            train_checkpoint(&model, &adam, epoch + 1, cfg.seed)?.save(&epoch_checkpoint_path(dir, epoch + 1))?;
        }
        if let Some((path, f)) = log_file.as_mut() {
            f.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        log::info!(
            "epoch {epoch}: last batch total {:.4}",
            log.last().map_or(f64::NAN, |r: &LogRecord| r.loss.total)
        );
    }
    model.params.clear_grads();
    if let Some(dir) = &io.run_dir {
        model.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        model,
        adam,
        epoch: end_epoch.max(start_epoch),
        log,
        warnings,
    })
}

impl RunConfig {
    /// The model config as restored from a checkpoint (where the attention
    /// switch is already resolved).
    pub fn model_for_checkpoint(&self) -> crate::config::ModelConfig {
        crate::config::ModelConfig {
            attention: None,
            ..self.model.clone()
        }
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Mean IoU between the attention maps thresholded at 0.5 and the coarse
/// masks, over every annotation of `scenes` taller than `min_height`, using
/// its full box as the proposal. Cells where both are empty count as IoU 1.
pub fn attention_iou(model: &Mgan, scenes: &[Scene], min_height: f64) -> Result<Option<f64>> {
    if !model.attention {
        return Ok(None);
    }
    let size = model.config.roi_size;
    let (mut sum, mut count) = (0.0, 0usize);
    for s in scenes {
        let anns: Vec<&PedAnnotation> = s.annotations.iter().filter(|a| a.height() > min_height).collect();
        if anns.is_empty() {
            continue;
        }
        let boxes: Vec<BBox> = anns.iter().map(|a| a.full_box).collect();
        let scored = model.score_boxes(&s.image, &boxes)?;
        for (a, map) in anns.iter().zip(&scored.maps) {
            let mask = rasterize_coarse_mask(&a.full_box, &a.visible_box, size, size)?;
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &t) in map.values.data().iter().zip(&mask.values) {
                let (pb, tb) = (p >= 0.5, t >= 0.5);
                inter += (pb && tb) as usize;
                union += (pb || tb) as usize;
            }
            sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}
