use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in scene units, corners `(x1, y1)` and `(x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-positive extents and non-finite corners.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::DegenerateBox(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    Ok(inter / (a.area() + b.area() - inter))
}

/// `(dx, dy, dw, dh)` of `gt` relative to `proposal`.
pub fn encode_deltas(gt: &BBox, proposal: &BBox) -> Result<[f64; 4]> {
    gt.validate()?;
    proposal.validate()?;
    let (gx, gy) = gt.center();
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    Ok([
        (gx - px) / pw,
        (gy - py) / ph,
        (gt.width() / pw).ln(),
        (gt.height() / ph).ln(),
    ])
}

/// Inverse of [`encode_deltas`].
pub fn decode_deltas(deltas: &[f64; 4], proposal: &BBox) -> Result<BBox> {
    proposal.validate()?;
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::NotFinite("box deltas".into()));
    }
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = px + deltas[0] * pw;
    let cy = py + deltas[1] * ph;
    let w = pw * deltas[2].exp();
    let h = ph * deltas[3].exp();
    BBox::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_reference_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        // intersection 2, union 4 + 4 - 2 = 6
        let v = iou(&a, &b(1.0, 0.0, 3.0, 2.0)).unwrap();
        assert!((v - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        let bad = BBox { x1: 0.0, y1: 0.0, x2: -1.0, y2: 1.0 };
        assert!(iou(&bad, &b(0.0, 0.0, 1.0, 1.0)).is_err());
        assert!(encode_deltas(&b(0.0, 0.0, 1.0, 1.0), &bad).is_err());
    }

    #[test]
    fn encode_reference_cases() {
        let p = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(encode_deltas(&p, &p).unwrap(), [0.0; 4]);
        // centers (1,1) -> (2,2): shift 1 over width 2
        assert_eq!(encode_deltas(&b(1.0, 1.0, 3.0, 3.0), &p).unwrap(), [0.5, 0.5, 0.0, 0.0]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(g in arb_box(), p in arb_box()) {
            let d = encode_deltas(&g, &p).unwrap();
            let back = decode_deltas(&d, &p).unwrap();
            for (x, y) in back.coords().iter().zip(g.coords()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c).unwrap();
            prop_assert_eq!(ab, iou(&c, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        }

        #[test]
        fn iou_grows_with_nested_intersection(a in arb_box(), t in 0.05..0.95f64) {
            // shrinking a copy of `a` toward its corner: smaller nested box, smaller IoU
            let inner = |s: f64| BBox::new(a.x1, a.y1, a.x1 + s * a.width(), a.y1 + s * a.height()).unwrap();
            let small = iou(&a, &inner(t * 0.5)).unwrap();
            let large = iou(&a, &inner(t)).unwrap();
            prop_assert!(small <= large);
        }
    }
}
