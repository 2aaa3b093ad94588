use serde::{Deserialize, Serialize};

use super::boxes::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    /// Image pixels per feature cell.
    pub stride: usize,
    /// Anchor side lengths in pixels (square-root of the area).
    pub scales: Vec<f64>,
    /// Height / width ratios.
    pub ratios: Vec<f64>,
    /// Heads are evaluated on every `application_stride`-th cell.
    pub application_stride: usize,
}

impl AnchorGrid {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    /// Number of head positions along an axis of `n` cells.
    pub fn positions(&self, n: usize) -> usize {
        n.div_ceil(self.application_stride.max(1))
    }

    /// Anchor template centred at the origin, per (scale, ratio).
    pub fn templates(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.per_cell());
        for &s in &self.scales {
            for &r in &self.ratios {
                let w = s / r.sqrt();
                let h = s * r.sqrt();
                out.push((w, h));
            }
        }
        out
    }
}

/// Anchor centre (in pixels) of head position `i` along one axis.
pub fn anchor_center(grid: &AnchorGrid, i: usize) -> f64 {
    (i * grid.stride * grid.application_stride.max(1)) as f64 + grid.stride as f64 / 2.0
}

/// All anchors, row-major over head positions, then scale, then ratio.
/// Anchors are not clipped to the image.
pub fn gen_anchors(grid: &AnchorGrid, feat_h: usize, feat_w: usize) -> Vec<BBox> {
    let (ph, pw) = (grid.positions(feat_h), grid.positions(feat_w));
    let templates = grid.templates();
    let mut out = Vec::with_capacity(ph * pw * templates.len());
    for y in 0..ph {
        let cy = anchor_center(grid, y);
        for x in 0..pw {
            let cx = anchor_center(grid, x);
            for &(w, h) in &templates {
                out.push(BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
            }
        }
    }
    out
}
