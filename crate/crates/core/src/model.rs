//! The full detector: backbone → RoI Align → (attention → modulation) →
//! detection head, plus inference and checkpoint helpers.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DetectConfig, ModelConfig};
use crate::detector::network::{
    backbone_forward, detection_head_forward, init_backbone, init_head, init_rpn_head,
    rpn_head_forward, HeadOutput,
};
use crate::detector::{decode_deltas, grid_proposals, nms, roi_align_graph, BBox, Detection, RoiAlignConfig};
use crate::error::{Error, Result};
use crate::mga::{init_mga, mga_forward_graph, modulate_graph, ProbabilityMap};
use crate::tensor::{Bindings, Checkpoint, Graph, ParamStore, Tensor, Var};

/// Model hyperparameters plus the resolved attention switch.
#[derive(Debug, Clone, PartialEq)]
pub struct Mgan {
    pub config: ModelConfig,
    pub attention: bool,
    pub params: ParamStore,
}

/// Graph handles of one image's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[N, S, S, C]` pooled features before modulation.
    pub roi: Var,
    /// `[N, S, S, 1]` attention maps when the branch is active.
    pub attention: Option<Var>,
    pub head: HeadOutput,
    pub rpn: Option<HeadOutput>,
    pub degenerate: Vec<bool>,
}

impl Mgan {
    /// Initializes every parameter from `seed`. Attention parameters exist
    /// even when the branch is off so all arms share one layout.
    pub fn new(config: ModelConfig, attention: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.channels;
        let in_dim = config.roi_size * config.roi_size * c;
        init_backbone(&mut params, c, &mut rng);
        init_mga(&mut params, c, &mut rng);
        init_head(&mut params, in_dim, config.fc_width, &mut rng);
        if config.rpn_emulation {
            init_rpn_head(&mut params, in_dim, &mut rng);
        }
        Self {
            config,
            attention,
            params,
        }
    }

    pub fn roi_config(&self) -> RoiAlignConfig {
        RoiAlignConfig {
            stride: crate::detector::network::BACKBONE_STRIDE,
            out_h: self.config.roi_size,
            out_w: self.config.roi_size,
            sampling: self.config.roi_sampling,
        }
    }

    /// Records the forward pass of one `[H, W, 3]` image over `proposals`.
    pub fn forward(&self, g: &mut Graph, b: &Bindings, image: Var, proposals: &[BBox]) -> Result<ForwardPass> {
        let fmap = backbone_forward(g, b, image, self.config.channels)?;
        let (roi, degenerate) = roi_align_graph(g, fmap, proposals, &self.roi_config())?;
        let (features, attention) = if self.attention {
            let map = mga_forward_graph(g, b, roi)?;
            (modulate_graph(g, roi, map)?, Some(map))
        } else {
            (roi, None)
        };
        let head = detection_head_forward(g, b, features)?;
        let rpn = if self.config.rpn_emulation {
            Some(rpn_head_forward(g, b, roi)?)
        } else {
            None
        };
        Ok(ForwardPass {
            roi,
            attention,
            head,
            rpn,
            degenerate,
        })
    }

    /// Scores, refined boxes and attention maps for `proposals` on detached
    /// parameters.
    pub fn score_boxes(&self, image: &Tensor, proposals: &[BBox]) -> Result<ScoredBoxes> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let img = g.constant(image);
        let f = self.forward(&mut g, &b, img, proposals)?;
        let scores = g.value(f.head.score).to_vec();
        let deltas = g.value(f.head.deltas);
        let std = self.config.delta_std;
        let refined = proposals
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d: [f64; 4] = std::array::from_fn(|k| deltas[4 * i + k] * std[k]);
                decode_deltas(p, &d)
            })
            .collect::<Result<Vec<_>>>()?;
        let maps = match f.attention {
            Some(a) => {
                let s = self.config.roi_size;
                let v = g.value(a);
                let per = s * s;
                (0..proposals.len())
                    .map(|i| ProbabilityMap::new(Tensor::new(vec![s, s, 1], v[i * per..(i + 1) * per].to_vec())?))
                    .collect::<Result<Vec<_>>>()?
            }
            None => Vec::new(),
        };
        Ok(ScoredBoxes {
            scores,
            refined,
            maps,
            degenerate: f.degenerate,
        })
    }

    /// Lattice proposals → scores → optional box refinement → NMS.
    pub fn detect(&self, image: &Tensor, image_id: &str, cfg: &DetectConfig) -> Result<Vec<Detection>> {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let proposals = grid_proposals((h, w), &cfg.heights, cfg.aspect, cfg.step_frac)?;
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let scored = self.score_boxes(image, &proposals)?;
        let mut dets = Vec::new();
        for (i, p) in proposals.iter().enumerate() {
            let score = scored.scores[i];
            if scored.degenerate[i] || score < cfg.score_threshold {
                continue;
            }
            let bbox = if cfg.apply_regression { scored.refined[i] } else { *p };
            dets.push(Detection {
                bbox,
                score,
                image_id: image_id.to_string(),
            });
        }
        let mut kept = nms(&dets, cfg.nms_iou)?;
        kept.truncate(cfg.max_per_image);
        Ok(kept)
    }

    /// Detections for every scene, in scene order.
    pub fn detect_scenes(&self, scenes: &[crate::synth::Scene], cfg: &DetectConfig) -> Result<Vec<Detection>> {
        let mut out = Vec::new();
        for s in scenes {
            out.extend(self.detect(&s.image, &s.image_id, cfg)?);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_params("model.", &self.params);
        let c = &self.config;
        for (k, v) in [
            ("model.channels", c.channels.to_string()),
            ("model.roi_size", c.roi_size.to_string()),
            ("model.fc_width", c.fc_width.to_string()),
            ("model.roi_sampling", c.roi_sampling.to_string()),
            ("model.rpn_emulation", c.rpn_emulation.to_string()),
            ("model.attention", self.attention.to_string()),
            ("model.delta_std", serde_json::to_string(&c.delta_std).expect("array serializes")),
        ] {
            ck.meta.insert(k.into(), v);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        fn parse<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
            ck.meta_value(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for {key}")))
        }
        let delta_std: [f64; 4] = serde_json::from_str(ck.meta_value("model.delta_std")?)
            .map_err(|e| Error::Checkpoint(format!("model.delta_std: {e}")))?;
        let config = ModelConfig {
            channels: parse(ck, "model.channels")?,
            roi_size: parse(ck, "model.roi_size")?,
            fc_width: parse(ck, "model.fc_width")?,
            roi_sampling: parse(ck, "model.roi_sampling")?,
            attention: None,
            rpn_emulation: parse(ck, "model.rpn_emulation")?,
            delta_std,
        };
        let attention = parse(ck, "model.attention")?;
        let params = ck.take_params("model.");
        // Shapes must match a freshly built model of the same config.
        let reference = Mgan::new(config.clone(), attention, 0);
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            attention,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Output of [`Mgan::score_boxes`].
#[derive(Debug, Clone)]
pub struct ScoredBoxes {
    pub scores: Vec<f64>,
    pub refined: Vec<BBox>,
    /// Empty when the attention branch is off.
    pub maps: Vec<ProbabilityMap>,
    pub degenerate: Vec<bool>,
}
