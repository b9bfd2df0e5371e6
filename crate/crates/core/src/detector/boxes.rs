use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates: top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from corner coordinates.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::contract(
                "box",
                format!(
                    "invalid box (x={}, y={}, w={}, h={}): size must be positive",
                    self.x, self.y, self.w, self.h
                ),
            ));
        }
        Ok(())
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
    }

    /// Overlap region, if it has positive area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x.max(other.x);
        let y1 = self.y.max(other.y);
        let x2 = self.x2().min(other.x2());
        let y2 = self.y2().min(other.y2());
        (x2 > x1 && y2 > y1).then(|| BBox {
            x: x1,
            y: y1,
            w: x2 - x1,
            h: y2 - y1,
        })
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        self.intersection(other).map_or(0.0, |b| b.area())
    }

    /// Half-open containment test `[x, x2) × [y, y2)`.
    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x2() && py >= self.y && py < self.y2()
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Regression targets relative to `anchor`: center offsets normalized by the
/// anchor size and log size ratios.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> Result<[f64; 4]> {
    anchor.validate()?;
    target.validate()?;
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    Ok([
        (tx - ax) / anchor.w,
        (ty - ay) / anchor.h,
        (target.w / anchor.w).ln(),
        (target.h / anchor.h).ln(),
    ])
}

pub fn decode_deltas(anchor: &BBox, deltas: &[f64; 4]) -> Result<BBox> {
    anchor.validate()?;
    let (ax, ay) = anchor.center();
    let cx = ax + deltas[0] * anchor.w;
    let cy = ay + deltas[1] * anchor.h;
    let w = anchor.w * deltas[2].exp();
    let h = anchor.h * deltas[3].exp();
    BBox::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-12);
        // Touching edges do not overlap.
        assert_eq!(iou(&a, &b(2.0, 0.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn codec_cases() {
        let anchor = BBox::from_center(5.0, 5.0, 10.0, 10.0).unwrap();
        assert_eq!(encode_deltas(&anchor, &anchor).unwrap(), [0.0; 4]);
        let target = BBox::from_center(10.0, 5.0, 20.0, 10.0).unwrap();
        let d = encode_deltas(&anchor, &target).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert!(d[1].abs() < 1e-12);
        assert!((d[2] - 2f64.ln()).abs() < 1e-12);
        assert!(d[3].abs() < 1e-12);
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        let anchor = b(0.0, 0.0, 1.0, 1.0);
        let bad = BBox {
            x: 0.0,
            y: 0.0,
            w: -2.0,
            h: 1.0,
        };
        assert!(encode_deltas(&anchor, &bad).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..80.0f64, 0.5..80.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c);
            prop_assert_eq!(ab, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn decode_inverts_encode(a in arb_box(), t in arb_box()) {
            let d = encode_deltas(&a, &t).unwrap();
            let back = decode_deltas(&a, &d).unwrap();
            for (u, v) in [(back.x, t.x), (back.y, t.y), (back.w, t.w), (back.h, t.h)] {
                prop_assert!((u - v).abs() < 1e-9, "{u} vs {v}");
            }
        }
    }
}
