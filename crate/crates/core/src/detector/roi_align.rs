//! RoI Align over channels-last feature maps.
//!
//! Boxes are mapped to feature coordinates by dividing by the stride, with no
//! rounding. Feature cell `i` covers `[i, i + 1)` and is sampled at its
//! center, so a continuous coordinate `u` interpolates between cells
//! `floor(u - 0.5)` and `floor(u - 0.5) + 1`. Each output bin averages
//! `sampling × sampling` bilinear samples on a regular grid inside the bin.
//! Samples that fall past the map edge replicate the border; a box that
//! misses the map entirely yields zeros and is flagged degenerate.

use super::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiAlignConfig {
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Samples per bin along each axis.
    pub sampling: usize,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        Self {
            stride: 8,
            out_h: 7,
            out_w: 7,
            sampling: 2,
        }
    }
}

/// Pooled features of one region, `[out_h, out_w, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeatures {
    pub values: Tensor,
}

/// Sparse sampling plan shared by the forward value and the graph op.
#[derive(Debug, Clone, Default)]
pub struct RoiTaps {
    pub offsets: Vec<usize>,
    pub taps: Vec<(usize, f64)>,
    /// One flag per box: the box misses the feature map entirely.
    pub degenerate: Vec<bool>,
}

/// Bilinear weights of the four neighbours of a sample at continuous feature
/// coordinates `(y, x)`. Samples beyond the map read the border cells.
pub fn bilinear_taps(feat_h: usize, feat_w: usize, y: f64, x: f64) -> Vec<(usize, f64)> {
    let yy = (y - 0.5).max(0.0);
    let xx = (x - 0.5).max(0.0);
    let (y0, y1, ly) = axis(yy, feat_h);
    let (x0, x1, lx) = axis(xx, feat_w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    vec![
        (y0 * feat_w + x0, hy * hx),
        (y0 * feat_w + x1, hy * lx),
        (y1 * feat_w + x0, ly * hx),
        (y1 * feat_w + x1, ly * lx),
    ]
}

fn axis(v: f64, len: usize) -> (usize, usize, f64) {
    let lo = v.floor() as usize;
    if lo >= len - 1 {
        (len - 1, len - 1, 0.0)
    } else {
        (lo, lo + 1, v - lo as f64)
    }
}

/// Builds the sampling plan for `boxes` on a `feat_h × feat_w` map.
pub fn plan(feat_h: usize, feat_w: usize, boxes: &[BBox], cfg: &RoiAlignConfig) -> Result<RoiTaps> {
    if cfg.stride == 0 || cfg.out_h == 0 || cfg.out_w == 0 || cfg.sampling == 0 {
        return Err(Error::contract(
            "roi_align",
            "stride, output size and sampling must be positive",
        ));
    }
    let stride = cfg.stride as f64;
    let extent = BBox {
        x: 0.0,
        y: 0.0,
        w: feat_w as f64 * stride,
        h: feat_h as f64 * stride,
    };
    let per_bin = (cfg.sampling * cfg.sampling) as f64;
    let mut out = RoiTaps {
        offsets: vec![0],
        ..Default::default()
    };
    for b in boxes {
        b.validate()?;
        let degenerate = b.intersection(&extent).is_none();
        out.degenerate.push(degenerate);
        let (x1, y1) = (b.x / stride, b.y / stride);
        let bin_h = b.h / stride / cfg.out_h as f64;
        let bin_w = b.w / stride / cfg.out_w as f64;
        for ph in 0..cfg.out_h {
            for pw in 0..cfg.out_w {
                if !degenerate {
                    for iy in 0..cfg.sampling {
                        let y = y1 + bin_h * (ph as f64 + (iy as f64 + 0.5) / cfg.sampling as f64);
                        for ix in 0..cfg.sampling {
                            let x = x1
                                + bin_w * (pw as f64 + (ix as f64 + 0.5) / cfg.sampling as f64);
                            out.taps.extend(
                                bilinear_taps(feat_h, feat_w, y, x)
                                    .into_iter()
                                    .filter(|&(_, w)| w != 0.0)
                                    .map(|(p, w)| (p, w / per_bin)),
                            );
                        }
                    }
                }
                out.offsets.push(out.taps.len());
            }
        }
    }
    Ok(out)
}

fn feature_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::contract(
            "roi_align",
            format!("feature map must be H x W x C, got {shape:?}"),
        )),
    }
}

/// Records RoI Align of every box as one `[N, out_h, out_w, C]` value.
/// Returns the per-box degenerate flags alongside.
pub fn roi_align_graph(
    g: &mut Graph,
    feature_map: Var,
    boxes: &[BBox],
    cfg: &RoiAlignConfig,
) -> Result<(Var, Vec<bool>)> {
    let (h, w, c) = feature_dims(g.shape(feature_map))?;
    if boxes.is_empty() {
        return Err(Error::contract("roi_align", "no boxes given"));
    }
    let plan = plan(h, w, boxes, cfg)?;
    let shape = vec![boxes.len(), cfg.out_h, cfg.out_w, c];
    let out = g.gather(feature_map, c, plan.offsets, plan.taps, shape)?;
    Ok((out, plan.degenerate))
}

/// RoI Align of a single box on a detached feature map.
pub fn roi_align(
    feature_map: &Tensor,
    bbox: &BBox,
    cfg: &RoiAlignConfig,
) -> Result<(RoiFeatures, bool)> {
    let mut g = Graph::new();
    let f = g.constant(feature_map);
    let (out, degenerate) = roi_align_graph(&mut g, f, std::slice::from_ref(bbox), cfg)?;
    let c = feature_map.shape()[2];
    let values = g.tensor(out).reshape(vec![cfg.out_h, cfg.out_w, c])?;
    Ok((RoiFeatures { values }, degenerate[0]))
}
