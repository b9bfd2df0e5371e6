//! Mask-guided attention: coarse mask targets from visible boxes, the
//! attention-map branch, and feature modulation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::network::bound;
use crate::detector::{BBox, RoiFeatures};
use crate::error::{Error, Result};
use crate::synth::Silhouette;
use crate::tensor::{Bindings, Graph, ParamStore, Tensor, Var};

/// A full-body box paired with the box of its visible region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedAnnotation {
    pub image_id: String,
    pub full_box: BBox,
    pub visible_box: BBox,
    /// Exact visible pixels, when the source provides them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub silhouette: Option<Silhouette>,
}

impl PedAnnotation {
    pub fn new(full_box: BBox, visible_box: BBox, image_id: impl Into<String>) -> Result<Self> {
        let a = Self {
            image_id: image_id.into(),
            full_box,
            visible_box,
            silhouette: None,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn with_silhouette(mut self, s: Silhouette) -> Self {
        self.silhouette = Some(s);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.full_box.validate()?;
        self.visible_box.validate()?;
        if self.full_box.intersection(&self.visible_box).is_none() {
            return Err(Error::contract(
                "annotation",
                format!("visible box of {} does not intersect its full box", self.image_id),
            ));
        }
        Ok(())
    }

    /// `area(visible ∩ full) / area(full)`.
    pub fn visibility_ratio(&self) -> f64 {
        self.visible_box.intersection_area(&self.full_box) / self.full_box.area()
    }

    pub fn height(&self) -> f64 {
        self.full_box.h
    }
}

/// Per-cell ground truth for the attention map, row-major `h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMask {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl CoarseMask {
    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Self {
            h,
            w,
            values: vec![v; h * w],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.w + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Sigmoid attention map `[H, W, 1]` for one region.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub values: Tensor,
}

impl ProbabilityMap {
    pub fn new(values: Tensor) -> Result<Self> {
        match values.shape() {
            [_, _, 1] => Ok(Self { values }),
            s => Err(Error::contract(
                "probability_map",
                format!("expected H x W x 1, got {s:?}"),
            )),
        }
    }

    pub fn h(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Center of grid cell `(row, col)` of `proposal` split into `out_h × out_w`.
pub fn cell_center(proposal: &BBox, out_h: usize, out_w: usize, row: usize, col: usize) -> (f64, f64) {
    (
        proposal.x + (col as f64 + 0.5) * proposal.w / out_w as f64,
        proposal.y + (row as f64 + 0.5) * proposal.h / out_h as f64,
    )
}

fn check_grid(op: &'static str, proposal: &BBox, out_h: usize, out_w: usize) -> Result<()> {
    proposal.validate()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract(op, "mask grid must be at least 1 x 1"));
    }
    Ok(())
}

/// Marks a cell 1 when its center lies in `visible_box ∩ proposal`.
/// Disjoint boxes give an all-zero mask.
pub fn rasterize_coarse_mask(
    proposal: &BBox,
    visible_box: &BBox,
    out_h: usize,
    out_w: usize,
) -> Result<CoarseMask> {
    check_grid("rasterize_coarse_mask", proposal, out_h, out_w)?;
    // Cell centers always lie inside the proposal, so testing the visible
    // box alone is testing the intersection.
    let mut mask = CoarseMask::filled(out_h, out_w, 0.0);
    for row in 0..out_h {
        for col in 0..out_w {
            let (cx, cy) = cell_center(proposal, out_h, out_w, row, col);
            if visible_box.contains_point(cx, cy) {
                mask.values[row * out_w + col] = 1.0;
            }
        }
    }
    Ok(mask)
}

/// Marks a cell 1 when its center falls on a visible silhouette pixel.
pub fn rasterize_dense_mask(
    proposal: &BBox,
    silhouette: &Silhouette,
    out_h: usize,
    out_w: usize,
) -> Result<CoarseMask> {
    check_grid("rasterize_dense_mask", proposal, out_h, out_w)?;
    let mut mask = CoarseMask::filled(out_h, out_w, 0.0);
    for row in 0..out_h {
        for col in 0..out_w {
            let (cx, cy) = cell_center(proposal, out_h, out_w, row, col);
            if silhouette.contains_point(cx, cy) {
                mask.values[row * out_w + col] = 1.0;
            }
        }
    }
    Ok(mask)
}

/// `1 − mean(mask)`: the fraction of the region that is occluded.
pub fn occlusion_weight(mask: &CoarseMask) -> Result<f64> {
    if let Some(v) = mask.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract(
            "occlusion_weight",
            format!("mask entry {v} outside [0, 1]"),
        ));
    }
    Ok((1.0 - mask.mean()).clamp(0.0, 1.0))
}

pub fn init_mga<R: Rng>(params: &mut ParamStore, channels: usize, rng: &mut R) {
    for name in ["mga.conv1", "mga.conv2"] {
        params.insert_uniform(&format!("{name}.weight"), &[3, 3, channels, channels], 9 * channels, rng);
        params.insert_zeros(&format!("{name}.bias"), &[channels]);
    }
    params.insert_uniform("mga.conv3.weight", &[1, 1, channels, 1], channels, rng);
    params.insert_zeros("mga.conv3.bias", &[1]);
}

/// conv3×3 → ReLU → conv3×3 → ReLU → conv1×1 → sigmoid over RoI features
/// `[N, H, W, C]` (or `[H, W, C]`), giving maps of the same spatial size with
/// one channel.
pub fn mga_forward_graph(g: &mut Graph, b: &Bindings, features: Var) -> Result<Var> {
    let mut x = features;
    for (name, pad) in [("mga.conv1", 1), ("mga.conv2", 1)] {
        let y = g.conv2d(
            x,
            bound(b, &format!("{name}.weight"))?,
            bound(b, &format!("{name}.bias"))?,
            1,
            pad,
        )?;
        x = g.relu(y);
    }
    let logit = g.conv2d(x, bound(b, "mga.conv3.weight")?, bound(b, "mga.conv3.bias")?, 1, 0)?;
    Ok(g.sigmoid(logit))
}

/// Attention map of one region on detached parameters.
pub fn mga_forward(features: &RoiFeatures, params: &ParamStore) -> Result<ProbabilityMap> {
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let f = g.constant(&features.values);
    let m = mga_forward_graph(&mut g, &b, f)?;
    ProbabilityMap::new(g.tensor(m))
}

/// Multiplies every channel of `features` by the single-channel `map`.
pub fn modulate_graph(g: &mut Graph, features: Var, map: Var) -> Result<Var> {
    g.mul(features, map).map_err(|e| match e {
        Error::Contract { detail, .. } => Error::contract("modulate", detail),
        other => other,
    })
}

pub fn modulate(features: &RoiFeatures, map: &ProbabilityMap) -> Result<RoiFeatures> {
    let mut g = Graph::new();
    let f = g.constant(&features.values);
    let m = g.constant(&map.values);
    let out = modulate_graph(&mut g, f, m)?;
    Ok(RoiFeatures {
        values: g.tensor(out),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn covering_visible_box_gives_all_ones() {
        let m = rasterize_coarse_mask(&b(2.0, 3.0, 10.0, 20.0), &b(0.0, 0.0, 50.0, 50.0), 7, 7).unwrap();
        assert!(m.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn disjoint_visible_box_gives_all_zeros() {
        let m = rasterize_coarse_mask(&b(0.0, 0.0, 10.0, 10.0), &b(20.0, 0.0, 5.0, 5.0), 7, 7).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn left_half_visible() {
        let m = rasterize_coarse_mask(&b(0.0, 0.0, 7.0, 7.0), &b(0.0, 0.0, 3.5, 7.0), 7, 7).unwrap();
        for row in 0..7 {
            for col in 0..7 {
                assert_eq!(m.get(row, col), if col < 3 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn occlusion_weight_cases() {
        assert_eq!(occlusion_weight(&CoarseMask::filled(7, 7, 1.0)).unwrap(), 0.0);
        assert_eq!(occlusion_weight(&CoarseMask::filled(7, 7, 0.0)).unwrap(), 1.0);
        let mut m = CoarseMask::filled(7, 7, 0.0);
        m.values[..21].iter_mut().for_each(|v| *v = 1.0);
        assert!((occlusion_weight(&m).unwrap() - 4.0 / 7.0).abs() < 1e-12);
        m.values[0] = 1.5;
        assert!(occlusion_weight(&m).is_err());
    }

    #[test]
    fn zero_parameters_give_half_map() {
        let mut params = ParamStore::new();
        init_mga(&mut params, 4, &mut ChaCha8Rng::seed_from_u64(0));
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let feats = RoiFeatures {
            values: Tensor::from_fn(&[7, 7, 4], |i| i as f64),
        };
        let map = mga_forward(&feats, &params).unwrap();
        assert_eq!(map.values.shape(), &[7, 7, 1]);
        assert!(map.values.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn random_parameters_stay_inside_unit_interval() {
        let mut params = ParamStore::new();
        init_mga(&mut params, 4, &mut ChaCha8Rng::seed_from_u64(9));
        let feats = RoiFeatures {
            values: Tensor::from_fn(&[7, 7, 4], |i| ((i * 7919) % 13) as f64 - 6.0),
        };
        let map = mga_forward(&feats, &params).unwrap();
        assert!(map.values.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn modulation_cases() {
        let feats = RoiFeatures {
            values: Tensor::from_fn(&[7, 7, 3], |i| (i % 3) as f64),
        };
        let ones = ProbabilityMap::new(Tensor::full(&[7, 7, 1], 1.0)).unwrap();
        assert_eq!(modulate(&feats, &ones).unwrap(), feats);
        let zeros = ProbabilityMap::new(Tensor::zeros(&[7, 7, 1])).unwrap();
        assert!(modulate(&feats, &zeros).unwrap().values.data().iter().all(|&v| v == 0.0));
        let quarter = ProbabilityMap::new(Tensor::full(&[7, 7, 1], 0.25)).unwrap();
        let out = modulate(&feats, &quarter).unwrap();
        for (i, v) in out.values.data().iter().enumerate() {
            assert_eq!(*v, 0.25 * (i % 3) as f64);
        }
        let wrong = ProbabilityMap::new(Tensor::zeros(&[5, 7, 1])).unwrap();
        assert!(matches!(
            modulate(&feats, &wrong),
            Err(Error::Contract { op: "modulate", .. })
        ));
    }

    #[test]
    fn annotation_requires_overlap() {
        assert!(PedAnnotation::new(b(0.0, 0.0, 10.0, 20.0), b(30.0, 0.0, 5.0, 5.0), "x").is_err());
        let a = PedAnnotation::new(b(0.0, 0.0, 10.0, 20.0), b(0.0, 0.0, 10.0, 7.0), "x").unwrap();
        assert!((a.visibility_ratio() - 0.35).abs() < 1e-12);
    }
}
