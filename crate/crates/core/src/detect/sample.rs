use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::boxes::{encode, iou, BBox};
use crate::error::{Result, TdmError};

#[derive(Clone, Copy, Debug)]
pub struct AnchorSampling {
    pub batch: usize,
    pub pos_fraction: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

/// Anchor labels: `1` positive, `0` negative, `-1` not sampled.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSample {
    pub labels: Vec<i8>,
    /// Sampled anchor indices, ascending.
    pub sampled: Vec<usize>,
    /// Sampled positives with their regression targets, ascending by anchor.
    pub positives: Vec<(usize, [f64; 4])>,
}

impl AnchorSample {
    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }
}

/// Best gt per box (lowest index on ties) and its IoU; `None` without gts.
pub fn best_match(b: &BBox, gts: &[BBox]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gts.iter().enumerate() {
        let v = iou(b, g);
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some((j, v));
        }
    }
    best
}

fn choose<R: Rng>(rng: &mut R, pool: &[usize], n: usize) -> Vec<usize> {
    if n >= pool.len() {
        return pool.to_vec();
    }
    let mut out: Vec<usize> = sample_indices(rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    out.sort_unstable();
    out
}

/// Label anchors (positive at IoU >= `pos_iou` or as the best anchor of some
/// gt, negative below `neg_iou`) and sample at most `batch` of them with at
/// most `pos_fraction * batch` positives.
pub fn match_and_sample<R: Rng>(
    anchors: &[BBox],
    gts: &[BBox],
    cfg: &AnchorSampling,
    rng: &mut R,
) -> Result<AnchorSample> {
    if cfg.batch == 0 {
        return Err(TdmError::Invalid("anchor batch must be positive".into()));
    }
    let n = anchors.len();
    let mut best = vec![(usize::MAX, 0.0f64); n];
    let mut gt_best = vec![0.0f64; gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best[i].1 || best[i].0 == usize::MAX {
                best[i] = (j, v);
            }
            gt_best[j] = gt_best[j].max(v);
        }
    }
    let mut state = vec![-1i8; n];
    for i in 0..n {
        if gts.is_empty() || best[i].1 < cfg.neg_iou {
            state[i] = 0;
        }
        if !gts.is_empty() && best[i].1 >= cfg.pos_iou {
            state[i] = 1;
        }
    }
    for (j, g) in gts.iter().enumerate() {
        if gt_best[j] <= 0.0 {
            continue;
        }
        for (i, a) in anchors.iter().enumerate() {
            if iou(a, g) == gt_best[j] {
                state[i] = 1;
            }
        }
    }
    let pos: Vec<usize> = (0..n).filter(|&i| state[i] == 1).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| state[i] == 0).collect();
    if pos.is_empty() && neg.is_empty() {
        return Err(TdmError::Invalid(
            "no positive or negative anchors to sample".into(),
        ));
    }
    let max_pos = (cfg.pos_fraction * cfg.batch as f64).floor() as usize;
    let pos = choose(rng, &pos, max_pos);
    let neg = choose(rng, &neg, cfg.batch - pos.len());
    let mut labels = vec![-1i8; n];
    let mut positives = Vec::with_capacity(pos.len());
    for &i in &pos {
        labels[i] = 1;
        positives.push((i, encode(&anchors[i], &gts[best[i].0])?));
    }
    for &i in &neg {
        labels[i] = 0;
    }
    let mut sampled: Vec<usize> = pos.iter().chain(&neg).copied().collect();
    sampled.sort_unstable();
    Ok(AnchorSample {
        labels,
        sampled,
        positives,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct RoiSampling {
    pub batch: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    pub bg_iou_lo: f64,
    /// Multipliers applied to `(tx, ty, tw, th)` targets.
    pub target_scale: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiSample {
    pub rois: Vec<BBox>,
    /// `0` background, `c + 1` for foreground class `c`.
    pub labels: Vec<usize>,
    /// Scaled regression targets; zero for background.
    pub targets: Vec<[f64; 4]>,
}

impl RoiSample {
    pub fn num_foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

/// Sample classifier ROIs: foreground at IoU >= `fg_iou`, background in
/// `[bg_iou_lo, fg_iou)`, topped up from `[0, bg_iou_lo)` when short.
pub fn sample_rois<R: Rng>(
    rois: &[BBox],
    gts: &[BBox],
    gt_classes: &[usize],
    cfg: &RoiSampling,
    rng: &mut R,
) -> Result<RoiSample> {
    if gts.len() != gt_classes.len() {
        return Err(TdmError::Invalid("gt boxes and classes differ in length".into()));
    }
    let matches: Vec<Option<(usize, f64)>> = rois.iter().map(|r| best_match(r, gts)).collect();
    let ov = |i: usize| matches[i].map_or(0.0, |m| m.1);
    let fg: Vec<usize> = (0..rois.len()).filter(|&i| ov(i) >= cfg.fg_iou).collect();
    let bg: Vec<usize> = (0..rois.len())
        .filter(|&i| ov(i) < cfg.fg_iou && ov(i) >= cfg.bg_iou_lo)
        .collect();
    let low: Vec<usize> = (0..rois.len()).filter(|&i| ov(i) < cfg.bg_iou_lo).collect();
    let fg = choose(rng, &fg, (cfg.fg_fraction * cfg.batch as f64).round() as usize);
    let mut bgs = choose(rng, &bg, cfg.batch - fg.len());
    let short = cfg.batch - fg.len() - bgs.len();
    bgs.extend(choose(rng, &low, short));
    if fg.is_empty() && bgs.is_empty() {
        return Err(TdmError::Invalid("no ROIs to sample".into()));
    }
    let mut out = RoiSample {
        rois: Vec::with_capacity(fg.len() + bgs.len()),
        labels: Vec::new(),
        targets: Vec::new(),
    };
    for &i in &fg {
        let (j, _) = matches[i].expect("foreground has a match");
        let t = encode(&rois[i], &gts[j])?;
        out.rois.push(rois[i]);
        out.labels.push(gt_classes[j] + 1);
        out.targets.push([
            t[0] * cfg.target_scale[0],
            t[1] * cfg.target_scale[1],
            t[2] * cfg.target_scale[2],
            t[3] * cfg.target_scale[3],
        ]);
    }
    for &i in &bgs {
        out.rois.push(rois[i]);
        out.labels.push(0);
        out.targets.push([0.0; 4]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> AnchorSampling {
        AnchorSampling {
            batch: 256,
            pos_fraction: 0.5,
            pos_iou: 0.7,
            neg_iou: 0.3,
        }
    }

    fn grid_boxes() -> Vec<BBox> {
        let mut v = Vec::new();
        for y in 0..20 {
            for x in 0..20 {
                let (x, y) = (x as f64 * 4.0, y as f64 * 4.0);
                v.push(BBox::new(x, y, x + 8.0, y + 8.0));
            }
        }
        v
    }

    #[test]
    fn exact_anchor_is_positive() {
        let anchors = grid_boxes();
        let gt = anchors[42];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = match_and_sample(&anchors, &[gt], &cfg(), &mut rng).unwrap();
        assert_eq!(s.labels[42], 1);
        assert!(s.positives.iter().any(|&(i, t)| i == 42 && t == [0.0; 4]));
    }

    #[test]
    fn no_gt_all_negative() {
        let anchors = grid_boxes();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = match_and_sample(&anchors, &[], &cfg(), &mut rng).unwrap();
        assert_eq!(s.sampled.len(), 256);
        assert!(s.sampled.iter().all(|&i| s.labels[i] == 0));
    }

    #[test]
    fn batch_and_fraction_respected() {
        let anchors = grid_boxes();
        let gts = [BBox::new(10.0, 10.0, 30.0, 30.0), BBox::new(40.0, 44.0, 52.0, 60.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = match_and_sample(&anchors, &gts, &cfg(), &mut rng).unwrap();
        assert_eq!(s.sampled.len(), 256);
        assert!(s.num_positive() <= 128 && s.num_positive() > 0);
    }

    #[test]
    fn background_scene_has_no_foreground_rois() {
        let rois = grid_boxes();
        let c = RoiSampling {
            batch: 128,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            bg_iou_lo: 0.1,
            target_scale: [10.0, 10.0, 5.0, 5.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_rois(&rois, &[], &[], &c, &mut rng).unwrap();
        assert_eq!(s.labels.len(), 128);
        assert_eq!(s.num_foreground(), 0);
    }
}
