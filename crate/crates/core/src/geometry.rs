//! Axis-aligned boxes, overlap, and the box-regression parameterization.
//!
//! Areas use the continuous convention `(x2 - x1) * (y2 - y1)`; there is no
//! `+1` pixel inflation anywhere in the crate.

use crate::{Error, Result};

/// Largest log-space size ratio accepted by [`decode`] before clamping.
pub fn decode_clamp() -> f64 {
    (1000.0f64 / 16.0).ln()
}

/// Floor applied to a normalizer standard deviation when the data has no spread.
pub const STDDEV_FLOOR: f64 = 1e-6;

/// Corner-form rectangle `(x1, y1)`–`(x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Validating constructor: corners must be finite and ordered.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGeometry(format!("non-finite box {b:?}")));
        }
        if x2 < x1 || y2 < y1 {
            return Err(Error::InvalidGeometry(format!("inverted box {b:?}")));
        }
        Ok(b)
    }

    /// Box from center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// `(row, col, height, width)` view of the box.
    pub fn rchw(&self) -> (f64, f64, f64, f64) {
        (self.y1, self.x1, self.height(), self.width())
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x2 >= self.x1
            && self.y2 >= self.y1
    }

    pub fn has_positive_extent(&self) -> bool {
        self.width() > 0.0 && self.height() > 0.0
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        BBox {
            x1,
            y1,
            x2: self.x2.clamp(x1, width),
            y2: self.y2.clamp(y1, height),
        }
    }

    /// Mirrors the box about the vertical center line of an image of `image_width`.
    pub fn flip_horizontal(&self, image_width: f64) -> BBox {
        BBox {
            x1: image_width - self.x2,
            y1: self.y1,
            x2: image_width - self.x1,
            y2: self.y2,
        }
    }

    pub fn scale(&self, factor: f64) -> BBox {
        BBox {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Lexicographic order on `(x1, y1, x2, y2)` using the IEEE total order.
    pub fn lex_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
    }
}

/// Intersection over union. Disjoint boxes and pairs with zero union give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Scale-invariant center offset plus log-space size ratio.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxTransform {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxTransform {
    pub const ZERO: BoxTransform = BoxTransform {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        BoxTransform { tx, ty, tw, th }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxTransform::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Regression target that moves `proposal` onto `target`.
pub fn encode(proposal: &BBox, target: &BBox) -> Result<BoxTransform> {
    if !proposal.has_positive_extent() {
        return Err(Error::InvalidGeometry(format!(
            "proposal {proposal:?} has non-positive extent"
        )));
    }
    if !target.has_positive_extent() {
        return Err(Error::InvalidGeometry(format!(
            "target {target:?} has non-positive extent"
        )));
    }
    let (pcx, pcy) = proposal.center();
    let (gcx, gcy) = target.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    Ok(BoxTransform {
        tx: (gcx - pcx) / pw,
        ty: (gcy - pcy) / ph,
        tw: (target.width() / pw).ln(),
        th: (target.height() / ph).ln(),
    })
}

/// Output of [`decode`]; `clamped` is set when a size ratio hit the clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub bbox: BBox,
    pub clamped: bool,
}

/// Applies `t` to `proposal`; inverse of [`encode`].
pub fn decode(proposal: &BBox, t: &BoxTransform) -> Result<Decoded> {
    if !proposal.has_positive_extent() {
        return Err(Error::InvalidGeometry(format!(
            "proposal {proposal:?} has non-positive extent"
        )));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite("box transform".into()));
    }
    let limit = decode_clamp();
    let tw = t.tw.min(limit);
    let th = t.th.min(limit);
    let clamped = tw != t.tw || th != t.th;
    let (pcx, pcy) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let bbox = BBox::from_center(
        pcx + t.tx * pw,
        pcy + t.ty * ph,
        pw * tw.exp(),
        ph * th.exp(),
    );
    Ok(Decoded { bbox, clamped })
}

/// Per-coordinate mean / standard deviation used to whiten regression targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetNormalizer {
    pub mean: [f64; 4],
    pub stddev: [f64; 4],
}

impl Default for TargetNormalizer {
    fn default() -> Self {
        TargetNormalizer::identity()
    }
}

impl TargetNormalizer {
    pub fn identity() -> Self {
        TargetNormalizer {
            mean: [0.0; 4],
            stddev: [1.0; 4],
        }
    }

    /// Fits population statistics pooled over all targets.
    ///
    /// The returned flag is true when some coordinate had (near) zero spread
    /// and its standard deviation was floored at [`STDDEV_FLOOR`].
    pub fn fit(targets: &[BoxTransform]) -> Result<(Self, bool)> {
        if targets.is_empty() {
            return Err(Error::Insufficient(
                "cannot fit a target normalizer on zero targets".into(),
            ));
        }
        let n = targets.len() as f64;
        let mut mean = [0.0; 4];
        for t in targets {
            for (m, v) in mean.iter_mut().zip(t.to_array()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; 4];
        for t in targets {
            for i in 0..4 {
                let d = t.to_array()[i] - mean[i];
                var[i] += d * d;
            }
        }
        let mut floored = false;
        let mut stddev = [0.0; 4];
        for i in 0..4 {
            let s = (var[i] / n).sqrt();
            if !s.is_finite() {
                return Err(Error::NonFinite("regression targets".into()));
            }
            if s < STDDEV_FLOOR {
                floored = true;
                stddev[i] = STDDEV_FLOOR;
            } else {
                stddev[i] = s;
            }
        }
        if floored {
            log::warn!("target normalizer: zero-variance coordinate, stddev floored");
        }
        Ok((TargetNormalizer { mean, stddev }, floored))
    }

    pub fn apply(&self, t: &BoxTransform) -> BoxTransform {
        let a = t.to_array();
        BoxTransform::from_array(std::array::from_fn(|i| {
            (a[i] - self.mean[i]) / self.stddev[i]
        }))
    }

    pub fn unapply(&self, t: &BoxTransform) -> BoxTransform {
        let a = t.to_array();
        BoxTransform::from_array(std::array::from_fn(|i| {
            a[i] * self.stddev[i] + self.mean[i]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = b(1.0, 2.0, 5.0, 9.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(6.0, 2.0, 8.0, 9.0)), 0.0);
        // touching edges share no area
        assert_eq!(iou(&a, &b(5.0, 2.0, 8.0, 9.0)), 0.0);
    }

    #[test]
    fn iou_overlapping_squares_is_one_seventh() {
        let v = iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn iou_degenerate_pair_is_zero() {
        let p = b(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &b(0.0, 0.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn constructor_rejects_bad_boxes() {
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn encode_identity_and_translation() {
        let p = b(10.0, 20.0, 30.0, 60.0);
        assert_eq!(encode(&p, &p).unwrap(), BoxTransform::ZERO);
        let shifted = b(30.0, 20.0, 50.0, 60.0);
        let t = encode(&p, &shifted).unwrap();
        assert_eq!(t, BoxTransform::new(1.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn encode_rejects_degenerate() {
        let p = b(0.0, 0.0, 0.0, 5.0);
        let g = b(0.0, 0.0, 5.0, 5.0);
        assert!(matches!(encode(&p, &g), Err(Error::InvalidGeometry(_))));
        assert!(matches!(encode(&g, &p), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn decode_zero_and_doubling() {
        let p = b(10.0, 20.0, 30.0, 60.0);
        let d = decode(&p, &BoxTransform::ZERO).unwrap();
        assert_eq!(d.bbox, p);
        assert!(!d.clamped);
        let d = decode(&p, &BoxTransform::new(0.0, 0.0, 2f64.ln(), 0.0)).unwrap();
        assert!((d.bbox.width() - 40.0).abs() < 1e-12);
        assert_eq!(d.bbox.center(), p.center());
    }

    #[test]
    fn decode_clamps_large_ratios() {
        let p = b(0.0, 0.0, 16.0, 16.0);
        let d = decode(&p, &BoxTransform::new(0.0, 0.0, 50.0, 1.0)).unwrap();
        assert!(d.clamped);
        assert!((d.bbox.width() - 1000.0).abs() < 1e-9);
        assert!(d.bbox.is_valid());
    }

    #[test]
    fn normalizer_symmetric_pair() {
        let ts = [
            BoxTransform::new(-1.0, -1.0, -1.0, -1.0),
            BoxTransform::new(1.0, 1.0, 1.0, 1.0),
        ];
        let (n, floored) = TargetNormalizer::fit(&ts).unwrap();
        assert!(!floored);
        assert_eq!(n.mean, [0.0; 4]);
        assert_eq!(n.stddev, [1.0; 4]);
    }

    #[test]
    fn normalizer_identical_targets_floored() {
        let t = BoxTransform::new(0.3, -0.2, 0.1, 0.05);
        let (n, floored) = TargetNormalizer::fit(&[t, t, t]).unwrap();
        assert!(floored);
        for i in 0..4 {
            assert!((n.mean[i] - t.to_array()[i]).abs() < 1e-15);
        }
        assert_eq!(n.stddev, [STDDEV_FLOOR; 4]);
        let back = n.unapply(&n.apply(&t));
        for i in 0..4 {
            assert!((back.to_array()[i] - t.to_array()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalizer_empty_is_error() {
        assert!(TargetNormalizer::fit(&[]).is_err());
    }

    #[test]
    fn flip_example() {
        let f = b(0.0, 0.0, 10.0, 10.0).flip_horizontal(100.0);
        assert_eq!(f, b(90.0, 0.0, 100.0, 10.0));
    }
}
