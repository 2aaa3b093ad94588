use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};

/// Axis-aligned box `[x1, y1, x2, y2]` in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
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

    pub fn is_valid(&self) -> bool {
        self.x2 >= self.x1 && self.y2 >= self.y1 && self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn clip(&self, img_w: f64, img_h: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, img_w),
            y1: self.y1.clamp(0.0, img_h),
            x2: self.x2.clamp(0.0, img_w),
            y2: self.y2.clamp(0.0, img_h),
        }
    }
}

/// Intersection over union with area `(x2 - x1) * (y2 - y1)`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Largest `|tw|`, `|th|` accepted by [`decode`]; keeps `exp` bounded.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

fn center_form(b: &BBox, op: &'static str) -> Result<(f64, f64, f64, f64)> {
    let (w, h) = (b.width(), b.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(TdmError::Invalid(format!(
            "{}: box {:?} has non-positive extent",
            op, b
        )));
    }
    Ok((b.x1 + 0.5 * w, b.y1 + 0.5 * h, w, h))
}

/// Regression target `(tx, ty, tw, th)` taking `anchor` to `gt`.
pub fn encode(anchor: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    let (ax, ay, aw, ah) = center_form(anchor, "encode")?;
    let (gx, gy, gw, gh) = center_form(gt, "encode")?;
    Ok([(gx - ax) / aw, (gy - ay) / ah, (gw / aw).ln(), (gh / ah).ln()])
}

/// Inverse of [`encode`], without clipping.
pub fn decode_raw(anchor: &BBox, d: &[f64; 4]) -> Result<BBox> {
    let (ax, ay, aw, ah) = center_form(anchor, "decode")?;
    let cx = ax + d[0] * aw;
    let cy = ay + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ah * d[3].min(MAX_LOG_SCALE).exp();
    Ok(BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h))
}

/// [`decode_raw`] clipped to the image.
pub fn decode(anchor: &BBox, d: &[f64; 4], img_w: f64, img_h: f64) -> Result<BBox> {
    Ok(decode_raw(anchor, d)?.clip(img_w, img_h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn identity_encoding() {
        let a = BBox::new(3.0, 4.0, 20.0, 11.0);
        assert_eq!(encode(&a, &a).unwrap(), [0.0; 4]);
        let r = decode_raw(&a, &[0.0; 4]).unwrap();
        assert!((r.x1 - 3.0).abs() < 1e-12 && (r.y2 - 11.0).abs() < 1e-12);
    }

    #[test]
    fn decode_clips() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = decode(&a, &[-1.0, -1.0, 1.0, 1.0], 8.0, 8.0).unwrap();
        assert_eq!(b.x1, 0.0);
        assert_eq!(b.y1, 0.0);
        assert!(b.x2 <= 8.0 && b.y2 <= 8.0);
    }

    #[test]
    fn degenerate_rejected() {
        let a = BBox::new(0.0, 0.0, 0.0, 10.0);
        assert!(encode(&a, &a).is_err());
    }
}
