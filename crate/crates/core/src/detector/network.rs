//! Desk-scale backbone and the RoI classification/regression head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Bindings, Graph, ParamStore, Var};

/// Total downsampling of [`backbone_forward`].
pub const BACKBONE_STRIDE: usize = 8;

/// `(name, input channels, output channels, stride)` of the four 3×3 blocks.
fn backbone_layers(channels: usize) -> [(&'static str, usize, usize, usize); 4] {
    let half = (channels / 2).max(1);
    [
        ("backbone.conv1", 3, half, 2),
        ("backbone.conv2", half, channels, 2),
        ("backbone.conv3", channels, channels, 2),
        ("backbone.conv4", channels, channels, 1),
    ]
}

pub(crate) fn bound(b: &Bindings, name: &str) -> Result<Var> {
    b.get(name)
        .copied()
        .ok_or_else(|| Error::contract("params", format!("parameter {name} is not bound")))
}

pub fn init_backbone<R: Rng>(params: &mut ParamStore, channels: usize, rng: &mut R) {
    for (name, cin, cout, _) in backbone_layers(channels) {
        params.insert_uniform(&format!("{name}.weight"), &[3, 3, cin, cout], 9 * cin, rng);
        params.insert_zeros(&format!("{name}.bias"), &[cout]);
    }
}

/// Four 3×3 conv + ReLU blocks with three stride-2 reductions.
/// `image` is `[H, W, 3]` with `H` and `W` divisible by 8.
pub fn backbone_forward(g: &mut Graph, b: &Bindings, image: Var, channels: usize) -> Result<Var> {
    let shape = g.shape(image).to_vec();
    match shape.as_slice() {
        &[h, w, 3] if h % BACKBONE_STRIDE == 0 && w % BACKBONE_STRIDE == 0 => {}
        _ => {
            return Err(Error::contract(
                "backbone_forward",
                format!("image must be H x W x 3 with H, W divisible by {BACKBONE_STRIDE}, got {shape:?}"),
            ))
        }
    }
    let mut x = image;
    for (name, _, _, stride) in backbone_layers(channels) {
        let w = bound(b, &format!("{name}.weight"))?;
        let bias = bound(b, &format!("{name}.bias"))?;
        let y = g.conv2d(x, w, bias, stride, 1)?;
        x = g.relu(y);
    }
    Ok(x)
}

pub fn init_head<R: Rng>(params: &mut ParamStore, in_dim: usize, fc_width: usize, rng: &mut R) {
    params.insert_uniform("head.fc1.weight", &[in_dim, fc_width], in_dim, rng);
    params.insert_zeros("head.fc1.bias", &[fc_width]);
    params.insert_uniform("head.fc2.weight", &[fc_width, fc_width], fc_width, rng);
    params.insert_zeros("head.fc2.bias", &[fc_width]);
    params.insert_uniform("head.cls.weight", &[fc_width, 1], fc_width, rng);
    params.insert_zeros("head.cls.bias", &[1]);
    params.insert_uniform("head.reg.weight", &[fc_width, 4], fc_width, rng);
    params.insert_zeros("head.reg.bias", &[4]);
}

/// Outputs of the detection head for `N` regions.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[N, 1]` pedestrian probability.
    pub score: Var,
    /// `[N, 4]` box deltas.
    pub deltas: Var,
}

/// FC → ReLU → FC → ReLU, then a sigmoid score and linear deltas in parallel.
/// `features` is `[N, H, W, C]` or `[H, W, C]`.
pub fn detection_head_forward(g: &mut Graph, b: &Bindings, features: Var) -> Result<HeadOutput> {
    let shape = g.shape(features).to_vec();
    let (n, dim) = match shape.as_slice() {
        &[h, w, c] => (1, h * w * c),
        &[n, h, w, c] => (n, h * w * c),
        _ => {
            return Err(Error::contract(
                "detection_head_forward",
                format!("features must be [N,] H x W x C, got {shape:?}"),
            ))
        }
    };
    let flat = g.reshape(features, vec![n, dim])?;
    let h1 = g.fully_connected(flat, bound(b, "head.fc1.weight")?, bound(b, "head.fc1.bias")?)?;
    let h1 = g.relu(h1);
    let h2 = g.fully_connected(h1, bound(b, "head.fc2.weight")?, bound(b, "head.fc2.bias")?)?;
    let h2 = g.relu(h2);
    let logit = g.fully_connected(h2, bound(b, "head.cls.weight")?, bound(b, "head.cls.bias")?)?;
    let score = g.sigmoid(logit);
    let deltas = g.fully_connected(h2, bound(b, "head.reg.weight")?, bound(b, "head.reg.bias")?)?;
    Ok(HeadOutput { score, deltas })
}

pub fn init_rpn_head<R: Rng>(params: &mut ParamStore, in_dim: usize, rng: &mut R) {
    params.insert_uniform("rpn.cls.weight", &[in_dim, 1], in_dim, rng);
    params.insert_zeros("rpn.cls.bias", &[1]);
    params.insert_uniform("rpn.reg.weight", &[in_dim, 4], in_dim, rng);
    params.insert_zeros("rpn.reg.bias", &[4]);
}

/// Auxiliary linear score/delta head on unmodulated RoI features, used only
/// when proposal-stage losses are emulated.
pub fn rpn_head_forward(g: &mut Graph, b: &Bindings, roi: Var) -> Result<HeadOutput> {
    let shape = g.shape(roi).to_vec();
    let n = shape[0];
    let dim: usize = shape[1..].iter().product();
    let flat = g.reshape(roi, vec![n, dim])?;
    let logit = g.fully_connected(flat, bound(b, "rpn.cls.weight")?, bound(b, "rpn.cls.bias")?)?;
    let score = g.sigmoid(logit);
    let deltas = g.fully_connected(flat, bound(b, "rpn.reg.weight")?, bound(b, "rpn.reg.bias")?)?;
    Ok(HeadOutput { score, deltas })
}
