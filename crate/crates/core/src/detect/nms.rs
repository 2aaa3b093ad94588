use super::boxes::{decode, iou, BBox};
use crate::error::Result;

/// Indices sorted by descending score; ties keep the lower index first.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; a box is suppressed when its IoU with a kept box exceeds `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let order = score_order(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ProposalParams {
    pub pre_nms: usize,
    pub post_nms: usize,
    pub nms_iou: f64,
    /// Boxes with a side of at most this many pixels are dropped.
    pub min_size: f64,
}

/// Decode, clip, drop degenerate boxes, keep the `pre_nms` best, NMS, keep `post_nms`.
pub fn proposals(
    scores: &[f64],
    deltas: &[[f64; 4]],
    anchors: &[BBox],
    img_w: f64,
    img_h: f64,
    p: &ProposalParams,
) -> Result<Vec<Proposal>> {
    assert!(scores.len() == anchors.len() && deltas.len() == anchors.len());
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut kept_scores = Vec::with_capacity(anchors.len());
    for ((a, d), &s) in anchors.iter().zip(deltas).zip(scores) {
        let b = decode(a, d, img_w, img_h)?;
        if b.width() > p.min_size && b.height() > p.min_size {
            boxes.push(b);
            kept_scores.push(s);
        }
    }
    let mut order = score_order(&kept_scores);
    order.truncate(p.pre_nms);
    let cand: Vec<BBox> = order.iter().map(|&i| boxes[i]).collect();
    let cand_s: Vec<f64> = order.iter().map(|&i| kept_scores[i]).collect();
    let mut keep = nms(&cand, &cand_s, p.nms_iou);
    keep.truncate(p.post_nms);
    Ok(keep
        .into_iter()
        .map(|i| Proposal {
            bbox: cand[i],
            score: cand_s[i],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty() {
        assert!(nms(&[], &[], 0.5).is_empty());
    }

    #[test]
    fn identical_pair() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.5), vec![1]);
    }

    #[test]
    fn nested_boxes() {
        // IoU = 60 / 100.
        let outer = BBox::new(0.0, 0.0, 10.0, 10.0);
        let inner = BBox::new(0.0, 0.0, 10.0, 6.0);
        assert!((iou(&outer, &inner) - 0.6).abs() < 1e-12);
        assert_eq!(nms(&[outer, inner], &[0.3, 0.7], 0.5), vec![1]);
        assert_eq!(nms(&[outer, inner], &[0.3, 0.7], 0.6), vec![1, 0]);
    }

    #[test]
    fn single_proposal() {
        let a = BBox::new(2.0, 2.0, 12.0, 12.0);
        let p = ProposalParams {
            pre_nms: 10,
            post_nms: 10,
            nms_iou: 0.7,
            min_size: 1.0,
        };
        let out = proposals(&[0.4], &[[0.0; 4]], &[a], 32.0, 32.0, &p).unwrap();
        assert_eq!(out, vec![Proposal { bbox: a, score: 0.4 }]);
    }
}
