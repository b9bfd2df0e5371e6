//! Synthetic occluded scenes with exact visibility ground truth.
//!
//! Targets are upright figures (head, torso, legs) whose bounding box is the
//! full-body box. Occluders are textured strips entering from the left,
//! right or bottom of a target, so the unoccluded part of the full box stays
//! rectangular. The visible box is the tight box of the target pixels left
//! uncovered, and each target's visible pixels are kept as a run-length
//! encoded [`Silhouette`].

pub mod io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::mga::PedAnnotation;
use crate::tensor::Tensor;

pub use io::{
    parse_annotations, read_split, write_annotations, write_split, ParseMode, ParsedAnnotations,
};

/// Integer pixel rectangle `[x, x + w) × [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl PixelRect {
    pub fn x2(&self) -> i64 {
        self.x + self.w
    }

    pub fn y2(&self) -> i64 {
        self.y + self.h
    }

    pub fn contains(&self, px: i64, py: i64) -> bool {
        px >= self.x && px < self.x2() && py >= self.y && py < self.y2()
    }

    pub fn overlaps(&self, o: &PixelRect) -> bool {
        self.x < o.x2() && o.x < self.x2() && self.y < o.y2() && o.y < self.y2()
    }

    pub fn grow(&self, m: i64) -> PixelRect {
        PixelRect {
            x: self.x - m,
            y: self.y - m,
            w: self.w + 2 * m,
            h: self.h + 2 * m,
        }
    }

    pub fn to_bbox(self) -> BBox {
        BBox::new(self.x as f64, self.y as f64, self.w as f64, self.h as f64)
            .expect("pixel rects have positive size")
    }
}

/// Binary pixel mask over a rectangle, run-length encoded row-major.
/// Runs alternate starting with a run of zeros (possibly empty).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Silhouette {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
    pub runs: Vec<u32>,
}

impl Silhouette {
    pub fn encode(x: i64, y: i64, w: usize, h: usize, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), w * h);
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        Self { x, y, w, h, runs }
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut bits = Vec::with_capacity(self.w * self.h);
        for (i, &r) in self.runs.iter().enumerate() {
            bits.extend(std::iter::repeat(i % 2 == 1).take(r as usize));
        }
        bits
    }

    pub fn count(&self) -> usize {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as usize).sum()
    }

    pub fn get(&self, px: i64, py: i64) -> bool {
        let (cx, cy) = (px - self.x, py - self.y);
        if cx < 0 || cy < 0 || cx >= self.w as i64 || cy >= self.h as i64 {
            return false;
        }
        let mut idx = (cy as usize * self.w + cx as usize) as u64;
        for (i, &r) in self.runs.iter().enumerate() {
            if idx < r as u64 {
                return i % 2 == 1;
            }
            idx -= r as u64;
        }
        false
    }

    /// Whether the pixel containing the real point `(px, py)` is set.
    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        self.get(px.floor() as i64, py.floor() as i64)
    }

    /// Tight box of the set pixels.
    pub fn bounding_box(&self) -> Option<PixelRect> {
        let bits = self.decode();
        let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            let (cx, cy) = ((i % self.w) as i64, (i / self.w) as i64);
            x0 = x0.min(cx);
            y0 = y0.min(cy);
            x1 = x1.max(cx);
            y1 = y1.max(cy);
        }
        (x0 <= x1).then(|| PixelRect {
            x: self.x + x0,
            y: self.y + y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
        })
    }
}

/// Figure shape inside a full-body rectangle: head on top, torso across the
/// full width, legs split by a central gap.
pub fn figure_contains(body: &PixelRect, px: i64, py: i64) -> bool {
    if !body.contains(px, py) {
        return false;
    }
    let (lx, ly) = (px - body.x, py - body.y);
    let head_rows = ((body.h as f64) * 0.16).round().max(1.0) as i64;
    let leg_start = ((body.h as f64) * 0.6).round() as i64;
    let mid2 = body.w; // twice the center column
    if ly < head_rows {
        let head_w = ((body.w as f64) * 0.45).round().max(1.0) as i64;
        let x0 = (body.w - head_w) / 2;
        return lx >= x0 && lx < x0 + head_w;
    }
    if ly >= leg_start {
        let gap = ((body.w as f64) * 0.16).round().max(1.0) as i64;
        let g0 = (mid2 - gap) / 2;
        return !(lx >= g0 && lx < g0 + gap);
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Texture {
    Checker { a: [f64; 3], b: [f64; 3], cell: i64 },
    Stripes { a: [f64; 3], b: [f64; 3], period: i64 },
    Flat { c: [f64; 3] },
    /// Per-pixel random choice between two colors, fixed by `key`.
    Speckle { a: [f64; 3], b: [f64; 3], key: u64 },
}

impl Texture {
    fn color(&self, px: i64, py: i64) -> [f64; 3] {
        match *self {
            Texture::Checker { a, b, cell } => {
                if (px.div_euclid(cell) + py.div_euclid(cell)) % 2 == 0 {
                    a
                } else {
                    b
                }
            }
            Texture::Stripes { a, b, period } => {
                if (px + py).rem_euclid(period) < period / 2 {
                    a
                } else {
                    b
                }
            }
            Texture::Flat { c } => c,
            Texture::Speckle { a, b, key } => {
                let mut z = key ^ (px as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (py as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
                z = (z ^ (z >> 29)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
                if (z ^ (z >> 32)) & 1 == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

/// Colors of one figure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FigurePalette {
    pub head: [f64; 3],
    pub torso: [f64; 3],
    pub torso_stripe: [f64; 3],
    pub legs: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetLayout {
    pub body: PixelRect,
    pub palette: FigurePalette,
}

/// Everything needed to render one scene deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub height: usize,
    pub width: usize,
    pub background: [f64; 3],
    pub gradient: [f64; 3],
    pub clutter: Vec<(PixelRect, Texture)>,
    pub targets: Vec<TargetLayout>,
    pub occluders: Vec<(PixelRect, Texture)>,
    pub noise: f64,
}

/// Rendered image plus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: String,
    /// `[H, W, 3]`, every value a multiple of 1/255.
    pub image: Tensor,
    pub annotations: Vec<PedAnnotation>,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

impl SceneLayout {
    /// Visible target pixels after all occluders, as a silhouette over the
    /// target's body rectangle.
    pub fn visible_silhouette(&self, target: &TargetLayout) -> Silhouette {
        let body = target.body;
        let mut bits = Vec::with_capacity((body.w * body.h) as usize);
        for py in body.y..body.y2() {
            for px in body.x..body.x2() {
                let inside = py >= 0
                    && px >= 0
                    && py < self.height as i64
                    && px < self.width as i64
                    && figure_contains(&body, px, py)
                    && !self.occluders.iter().any(|(r, _)| r.contains(px, py));
                bits.push(inside);
            }
        }
        Silhouette::encode(body.x, body.y, body.w as usize, body.h as usize, &bits)
    }

    /// Draws the scene. Targets with no visible pixel are dropped from the
    /// annotations.
    pub fn render(&self, image_id: &str, noise_seed: u64) -> Result<Scene> {
        let (h, w) = (self.height, self.width);
        let mut img = vec![0.0; h * w * 3];
        let put = |img: &mut Vec<f64>, px: i64, py: i64, c: [f64; 3]| {
            if px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h {
                let o = (py as usize * w + px as usize) * 3;
                img[o..o + 3].copy_from_slice(&c);
            }
        };
        for y in 0..h {
            for x in 0..w {
                let t = (x as f64 / w as f64 + y as f64 / h as f64) * 0.5;
                let c: [f64; 3] = std::array::from_fn(|k| self.background[k] + self.gradient[k] * t);
                put(&mut img, x as i64, y as i64, c);
            }
        }
        for (r, tex) in &self.clutter {
            for py in r.y..r.y2() {
                for px in r.x..r.x2() {
                    put(&mut img, px, py, tex.color(px, py));
                }
            }
        }
        for t in &self.targets {
            let b = t.body;
            let head_rows = ((b.h as f64) * 0.16).round().max(1.0) as i64;
            let leg_start = ((b.h as f64) * 0.6).round() as i64;
            for py in b.y..b.y2() {
                for px in b.x..b.x2() {
                    if !figure_contains(&b, px, py) {
                        continue;
                    }
                    let ly = py - b.y;
                    let c = if ly < head_rows {
                        t.palette.head
                    } else if ly < leg_start {
                        if (ly / 3) % 2 == 0 {
                            t.palette.torso
                        } else {
                            t.palette.torso_stripe
                        }
                    } else {
                        t.palette.legs
                    };
                    put(&mut img, px, py, c);
                }
            }
        }
        for (r, tex) in &self.occluders {
            for py in r.y..r.y2() {
                for px in r.x..r.x2() {
                    put(&mut img, px, py, tex.color(px, py));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for v in img.iter_mut() {
            let n = if self.noise > 0.0 {
                rng.gen_range(-self.noise..=self.noise)
            } else {
                0.0
            };
            *v = quantize(*v + n);
        }

        let mut annotations = Vec::new();
        for t in &self.targets {
            let sil = self.visible_silhouette(t);
            let Some(vis) = sil.bounding_box() else {
                continue;
            };
            let ann = PedAnnotation::new(t.body.to_bbox(), vis.to_bbox(), image_id)?
                .with_silhouette(sil);
            annotations.push(ann);
        }
        Ok(Scene {
            image_id: image_id.to_string(),
            image: Tensor::new(vec![h, w, 3], img)?,
            annotations,
        })
    }
}

/// Parameters of the random scene distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub min_targets: usize,
    pub max_targets: usize,
    pub min_target_height: i64,
    pub max_target_height: i64,
    /// Full-box width / height.
    pub aspect: f64,
    /// Probability that a target gets an occluder.
    pub occluded_fraction: f64,
    /// Visibility of occluded targets is drawn uniformly from this range.
    pub min_visibility: f64,
    pub max_visibility: f64,
    /// Allowed gap between the drawn and the achieved visibility ratio.
    pub visibility_tolerance: f64,
    pub occluder_sides: Vec<Side>,
    pub max_clutter: usize,
    pub noise: f64,
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_height: 96,
            image_width: 128,
            min_targets: 1,
            max_targets: 3,
            min_target_height: 52,
            max_target_height: 88,
            aspect: 0.41,
            occluded_fraction: 0.7,
            min_visibility: 0.25,
            max_visibility: 0.9,
            visibility_tolerance: 0.02,
            occluder_sides: vec![Side::Left, Side::Right, Side::Bottom],
            max_clutter: 6,
            noise: 0.04,
            max_attempts: 200,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if self.image_height == 0 || self.image_width == 0 {
            return fail("image size must be positive".into());
        }
        if self.min_targets > self.max_targets {
            return fail("min_targets > max_targets".into());
        }
        if self.min_target_height < 8 || self.min_target_height > self.max_target_height {
            return fail(format!(
                "target height range [{}, {}] is empty or below 8 px",
                self.min_target_height, self.max_target_height
            ));
        }
        if self.max_target_height as usize > self.image_height {
            return fail(format!(
                "target height {} does not fit image height {}",
                self.max_target_height, self.image_height
            ));
        }
        let widest = (self.max_target_height as f64 * self.aspect).round() as usize;
        if widest == 0 || widest > self.image_width {
            return fail(format!("target width {widest} does not fit image width {}", self.image_width));
        }
        if !(0.0..=1.0).contains(&self.occluded_fraction) {
            return fail("occluded_fraction outside [0, 1]".into());
        }
        if !(self.min_visibility > 0.0
            && self.min_visibility <= self.max_visibility
            && self.max_visibility < 1.0)
        {
            return fail(format!(
                "visibility range [{}, {}] must lie in (0, 1)",
                self.min_visibility, self.max_visibility
            ));
        }
        if self.occluded_fraction > 0.0 && self.occluder_sides.is_empty() {
            return fail("occlusion requested but no occluder side allowed".into());
        }
        if self.visibility_tolerance < 0.0 {
            return fail("visibility_tolerance must be non-negative".into());
        }
        // Finest achievable visibility step over the allowed sides: one row
        // (bottom) or one column (left/right) of the smallest target.
        if self.occluded_fraction > 0.0 {
            let min_w = (self.min_target_height as f64 * self.aspect).round().max(1.0);
            let step = self
                .occluder_sides
                .iter()
                .map(|s| match s {
                    Side::Bottom => 1.0 / self.min_target_height as f64,
                    Side::Left | Side::Right => 1.0 / min_w,
                })
                .fold(f64::INFINITY, f64::min);
            let span = self.max_visibility - self.min_visibility + 2.0 * self.visibility_tolerance;
            if step / 2.0 > self.visibility_tolerance && step > span {
                return fail(format!(
                    "visibility range [{}, {}] ± {} unreachable with pixel steps of {step:.3}",
                    self.min_visibility, self.max_visibility, self.visibility_tolerance
                ));
            }
        }
        Ok(())
    }
}

fn jitter_color<R: Rng>(rng: &mut R, base: [f64; 3], amount: f64) -> [f64; 3] {
    std::array::from_fn(|k| (base[k] + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Occluders and clutter share this distribution, so an occluder looks like
/// any other background object.
fn random_object_texture<R: Rng>(rng: &mut R) -> Texture {
    let a: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
    // Push the second color away from the first for visible structure.
    let b: [f64; 3] = std::array::from_fn(|k| {
        let d = rng.gen_range(0.35..0.6);
        if a[k] > 0.5 { a[k] - d } else { a[k] + d }
    });
    match rng.gen_range(0..3) {
        0 => Texture::Checker {
            a,
            b,
            cell: rng.gen_range(2..6),
        },
        1 => Texture::Stripes {
            a,
            b,
            period: rng.gen_range(4..10),
        },
        _ => Texture::Speckle { a, b, key: rng.gen() },
    }
}

fn random_palette<R: Rng>(rng: &mut R) -> FigurePalette {
    let torso: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.9));
    FigurePalette {
        head: jitter_color(rng, [0.85, 0.65, 0.5], 0.08),
        torso,
        torso_stripe: std::array::from_fn(|k| (torso[k] * 0.6).clamp(0.0, 1.0)),
        legs: jitter_color(rng, [0.15, 0.18, 0.35], 0.08),
    }
}

/// Occluder rectangle hiding all of `body` except `keep` rows/columns on the
/// far side from `side`, extended by `margin` beyond the body elsewhere.
fn occluder_rect(body: &PixelRect, side: Side, keep: i64, margin: i64) -> PixelRect {
    match side {
        Side::Bottom => PixelRect {
            x: body.x - margin,
            y: body.y + keep,
            w: body.w + 2 * margin,
            h: body.h - keep + margin,
        },
        Side::Left => PixelRect {
            x: body.x - margin,
            y: body.y - margin,
            w: body.w - keep + margin,
            h: body.h + 2 * margin,
        },
        Side::Right => PixelRect {
            x: body.x + keep,
            y: body.y - margin,
            w: body.w - keep + margin,
            h: body.h + 2 * margin,
        },
    }
}

/// Tight visible box of `body` with a single occluder applied.
fn visible_after(body: &PixelRect, occ: &PixelRect) -> Option<PixelRect> {
    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for py in body.y..body.y2() {
        for px in body.x..body.x2() {
            if figure_contains(body, px, py) && !occ.contains(px, py) {
                x0 = x0.min(px);
                y0 = y0.min(py);
                x1 = x1.max(px);
                y1 = y1.max(py);
            }
        }
    }
    (x0 <= x1).then(|| PixelRect {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}

/// Draws a random scene layout from `spec`.
pub fn generate_layout(spec: &SceneSpec, seed: u64) -> Result<SceneLayout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ih, iw) = (spec.image_height as i64, spec.image_width as i64);
    let background = std::array::from_fn(|_| rng.gen_range(0.25..0.6));
    let gradient = std::array::from_fn(|_| rng.gen_range(-0.15..0.15));

    let n_targets = rng.gen_range(spec.min_targets..=spec.max_targets);
    let mut targets: Vec<TargetLayout> = Vec::new();
    let mut occluders: Vec<(PixelRect, Texture)> = Vec::new();
    // Claimed areas (targets and their occluders, padded) must stay disjoint
    // so that occluders never touch another target.
    let mut claimed: Vec<PixelRect> = Vec::new();

    for _ in 0..n_targets {
        let mut placed = false;
        for _ in 0..spec.max_attempts {
            let th = rng.gen_range(spec.min_target_height..=spec.max_target_height);
            let tw = ((th as f64) * spec.aspect).round().max(1.0) as i64;
            if tw > iw || th > ih {
                continue;
            }
            let body = PixelRect {
                x: rng.gen_range(0..=iw - tw),
                y: rng.gen_range(0..=ih - th),
                w: tw,
                h: th,
            };
            let occluded = rng.gen_bool(spec.occluded_fraction);
            let mut occ = None;
            if occluded {
                let target_vis = rng.gen_range(spec.min_visibility..=spec.max_visibility);
                let mut sides = spec.occluder_sides.clone();
                sides.shuffle(&mut rng);
                let margin = rng.gen_range(1..=6);
                let mut best: Option<(f64, PixelRect)> = None;
                for side in sides {
                    let extent = if side == Side::Bottom { th } else { tw };
                    for keep in 1..extent {
                        let r = occluder_rect(&body, side, keep, margin);
                        let Some(vis) = visible_after(&body, &r) else {
                            continue;
                        };
                        let ratio = (vis.w * vis.h) as f64 / (tw * th) as f64;
                        let err = (ratio - target_vis).abs();
                        if err <= spec.visibility_tolerance
                            && best.as_ref().map_or(true, |(e, _)| err < *e)
                        {
                            best = Some((err, r));
                        }
                    }
                    if best.is_some() {
                        break;
                    }
                }
                match best {
                    Some((_, r)) => occ = Some(r),
                    None => continue,
                }
            }
            let footprint = [Some(body), occ].into_iter().flatten().map(|r| r.grow(2));
            let footprint: Vec<PixelRect> = footprint.collect();
            if footprint
                .iter()
                .any(|f| claimed.iter().any(|c| c.overlaps(f)))
            {
                continue;
            }
            claimed.extend(footprint);
            targets.push(TargetLayout {
                body,
                palette: random_palette(&mut rng),
            });
            if let Some(r) = occ {
                occluders.push((r, random_object_texture(&mut rng)));
            }
            placed = true;
            break;
        }
        if !placed {
            if targets.len() < spec.min_targets {
                return Err(Error::Generation(format!(
                    "could not place {} targets with visibility in [{}, {}] ± {} after {} attempts",
                    spec.min_targets,
                    spec.min_visibility,
                    spec.max_visibility,
                    spec.visibility_tolerance,
                    spec.max_attempts
                )));
            }
            break;
        }
    }

    let n_clutter = rng.gen_range(0..=spec.max_clutter);
    let mut clutter = Vec::new();
    for _ in 0..n_clutter {
        let h = rng.gen_range(8..=(ih / 2).max(9));
        let w = rng.gen_range(8..=(iw / 3).max(9));
        let r = PixelRect {
            x: rng.gen_range(-4..iw - 4),
            y: rng.gen_range(-4..ih - 4),
            w,
            h,
        };
        clutter.push((r, random_object_texture(&mut rng)));
    }

    Ok(SceneLayout {
        height: spec.image_height,
        width: spec.image_width,
        background,
        gradient,
        clutter,
        targets,
        occluders,
        noise: spec.noise,
    })
}

/// Renders `count` scenes with ids `{prefix}_{index:05}`. Scene seeds are
/// drawn from a stream seeded by `seed`.
pub fn generate_split(spec: &SceneSpec, count: usize, seed: u64, prefix: &str) -> Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let s: u64 = rng.gen();
            generate_scene(spec, s, &format!("{prefix}_{i:05}"))
        })
        .collect()
}

/// Renders one random scene.
pub fn generate_scene(spec: &SceneSpec, seed: u64, image_id: &str) -> Result<Scene> {
    let layout = generate_layout(spec, seed)?;
    layout.render(image_id, seed ^ 0x9e37_79b9_7f4a_7c15)
}

/// `area(visible ∩ full) / area(full)`.
pub fn visibility_ratio(annotation: &PedAnnotation) -> f64 {
    annotation.visibility_ratio()
}
