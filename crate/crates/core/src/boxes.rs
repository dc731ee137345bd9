//! Axis-aligned boxes in normalized center-size form, IoU, and GIoU.

use crate::error::{Error, Result};

/// Smallest admissible box extent; predicted widths/heights are floored here.
pub const MIN_EXTENT: f64 = 1e-4;

/// A box as `(cx, cy, w, h)` in normalized `[0, 1]` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxXYWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXYWH {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoxXYWH { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.cx, self.cy, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("box has non-finite coordinate".into()));
        }
        if vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "box coordinates must lie in [0, 1], got {vals:?}"
            )));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidArgument("box width and height must be positive".into()));
        }
        Ok(())
    }

    /// Corner form `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// From corner form.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        BoxXYWH::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }
}

/// Intersection-over-union; 0 for disjoint boxes.
pub fn iou(a: &BoxXYWH, b: &BoxXYWH) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    // areas from corner form so that identical boxes give exactly 1
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU: `IoU - (area(enclosure) - area(union)) / area(enclosure)`,
/// where the enclosure is the smallest axis-aligned box covering both. Range
/// `(-1, 1]` with 1 exactly for identical boxes.
pub fn giou(a: &BoxXYWH, b: &BoxXYWH) -> f64 {
    giou_with_grad(a, b).0
}

/// GIoU with its gradient w.r.t. the first box's `(cx, cy, w, h)`.
///
/// Subgradients are used at the (measure-zero) corner ties and at zero
/// intersection width/height.
pub fn giou_with_grad(a: &BoxXYWH, b: &BoxXYWH) -> (f64, [f64; 4]) {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();

    let xx1 = ax1.max(bx1);
    let yy1 = ay1.max(by1);
    let xx2 = ax2.min(bx2);
    let yy2 = ay2.min(by2);
    let iw = (xx2 - xx1).max(0.0);
    let ih = (yy2 - yy1).max(0.0);
    let inter = iw * ih;

    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;

    let ex1 = ax1.min(bx1);
    let ey1 = ay1.min(by1);
    let ex2 = ax2.max(bx2);
    let ey2 = ay2.max(by2);
    let enc = (ex2 - ex1) * (ey2 - ey1);

    let iou = inter / union;
    let value = iou - (enc - union) / enc;

    // d inter / d corners of a (active only while the overlap is non-empty)
    let (mut di_ax1, mut di_ay1, mut di_ax2, mut di_ay2) = (0.0, 0.0, 0.0, 0.0);
    if iw > 0.0 && ih > 0.0 {
        if ax1 > bx1 {
            di_ax1 = -ih;
        }
        if ax2 < bx2 {
            di_ax2 = ih;
        }
        if ay1 > by1 {
            di_ay1 = -iw;
        }
        if ay2 < by2 {
            di_ay2 = iw;
        }
    }

    // d area_a / d corners
    let (da_ax1, da_ay1, da_ax2, da_ay2) =
        (-(ay2 - ay1), -(ax2 - ax1), ay2 - ay1, ax2 - ax1);

    // d enclosure / d corners (active where a's edge is the extreme one)
    let (mut de_ax1, mut de_ay1, mut de_ax2, mut de_ay2) = (0.0, 0.0, 0.0, 0.0);
    if ax1 < bx1 {
        de_ax1 = -(ey2 - ey1);
    }
    if ax2 > bx2 {
        de_ax2 = ey2 - ey1;
    }
    if ay1 < by1 {
        de_ay1 = -(ex2 - ex1);
    }
    if ay2 > by2 {
        de_ay2 = ex2 - ex1;
    }

    // chain: giou = inter/union - 1 + union/enc, with d union = d area_a - d inter
    let corner_grad = |di: f64, da: f64, de: f64| -> f64 {
        let du = da - di;
        let d_iou = (di * union - inter * du) / (union * union);
        let d_pen = (du * enc - union * de) / (enc * enc);
        d_iou + d_pen
    };
    let g_ax1 = corner_grad(di_ax1, da_ax1, de_ax1);
    let g_ay1 = corner_grad(di_ay1, da_ay1, de_ay1);
    let g_ax2 = corner_grad(di_ax2, da_ax2, de_ax2);
    let g_ay2 = corner_grad(di_ay2, da_ay2, de_ay2);

    // corners to (cx, cy, w, h)
    let grad = [
        g_ax1 + g_ax2,
        g_ay1 + g_ay2,
        0.5 * (g_ax2 - g_ax1),
        0.5 * (g_ay2 - g_ay1),
    ];
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoxXYWH {
        BoxXYWH::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = bx(0.3, 0.3, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        let b = bx(0.8, 0.8, 0.1, 0.1);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_half_overlap_worked_example() {
        // corners (0,0,0.5,0.5) vs (0.25,0,0.75,0.5): inter 0.125, union 0.375
        let a = bx(0.25, 0.25, 0.5, 0.5);
        let b = bx(0.5, 0.25, 0.5, 0.5);
        assert_abs_diff_eq!(iou(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn giou_worked_examples() {
        let a = bx(0.3, 0.3, 0.2, 0.2);
        assert_abs_diff_eq!(giou(&a, &a), 1.0, epsilon = 1e-12);

        // touching squares covering [0,0.5]x[0,1] and [0.5,1]x[0,1]:
        // IoU 0, enclosure area equals union area
        let l = bx(0.25, 0.5, 0.5, 1.0);
        let r = bx(0.75, 0.5, 0.5, 1.0);
        assert_abs_diff_eq!(giou(&l, &r), 0.0, epsilon = 1e-12);

        // corners (0,0,.1,.1) and (.9,0,1,.1): IoU 0, union 0.02, enclosure 0.1
        let a = bx(0.05, 0.05, 0.1, 0.1);
        let b = bx(0.95, 0.05, 0.1, 0.1);
        assert_abs_diff_eq!(giou(&a, &b), -0.8, epsilon = 1e-12);
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let cases = [
            (bx(0.4, 0.45, 0.3, 0.25), bx(0.5, 0.5, 0.2, 0.3)),
            (bx(0.2, 0.2, 0.15, 0.1), bx(0.7, 0.6, 0.2, 0.2)),
            (bx(0.5, 0.5, 0.4, 0.4), bx(0.5, 0.5, 0.1, 0.1)),
        ];
        let eps = 1e-6;
        for (a, b) in cases {
            let (_, grad) = giou_with_grad(&a, &b);
            for k in 0..4 {
                let mut plus = a;
                let mut minus = a;
                match k {
                    0 => {
                        plus.cx += eps;
                        minus.cx -= eps;
                    }
                    1 => {
                        plus.cy += eps;
                        minus.cy -= eps;
                    }
                    2 => {
                        plus.w += eps;
                        minus.w -= eps;
                    }
                    _ => {
                        plus.h += eps;
                        minus.h -= eps;
                    }
                }
                let fd = (giou(&plus, &b) - giou(&minus, &b)) / (2.0 * eps);
                assert_abs_diff_eq!(grad[k], fd, epsilon = 1e-6);
            }
        }
    }

    fn arb_box() -> impl Strategy<Value = BoxXYWH> {
        (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.5, 0.01f64..0.5).prop_map(|(cx, cy, w, h)| {
            let w = w.min(2.0 * cx.min(1.0 - cx));
            let h = h.min(2.0 * cy.min(1.0 - cy));
            BoxXYWH { cx, cy, w: w.max(1e-3), h: h.max(1e-3) }
        })
    }

    proptest! {
        #[test]
        fn giou_bounded_below_iou_and_symmetric(a in arb_box(), b in arb_box()) {
            let g = giou(&a, &b);
            let i = iou(&a, &b);
            prop_assert!(g <= i + 1e-9);
            prop_assert!(g > -1.0 && g <= 1.0 + 1e-12);
            prop_assert!((g - giou(&b, &a)).abs() < 1e-9);
            prop_assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
        }
    }
}
