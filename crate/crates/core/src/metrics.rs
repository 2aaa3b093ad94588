//! COCO-style box evaluation: AP over IoU 0.50:0.05:0.95 with 101-point
//! interpolation, AR at per-image detection caps, and size buckets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detect::{iou, BBox, DetectionRecord};
use crate::error::{Result, TdmError};
use crate::synthdata::{area_thresholds, AnnotationRecord};

pub const NUM_RECALL_POINTS: usize = 101;

pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub num_classes: usize,
    /// Multiplier on the 32^2 / 96^2 size-bucket thresholds.
    pub size_scale: f64,
    pub iou_thresholds: Vec<f64>,
    /// Per-image detection caps; the largest one is used for AP.
    pub max_dets: [usize; 3],
}

impl EvalSpec {
    pub fn new(num_classes: usize, size_scale: f64) -> Self {
        EvalSpec {
            num_classes,
            size_scale,
            iou_thresholds: coco_iou_thresholds(),
            max_dets: [1, 10, 100],
        }
    }

    /// Area ranges `[lo, hi)` for all / small / medium / large.
    fn area_ranges(&self) -> [(f64, f64); 4] {
        let (s, m) = area_thresholds(self.size_scale);
        [(0.0, f64::INFINITY), (0.0, s), (s, m), (m, f64::INFINITY)]
    }
}

/// Greedy matching for one image and class. `dets` must be score-sorted.
/// Each detection takes the highest-IoU unmatched gt with IoU >= `thresh`
/// (first index on ties). Returns the matched gt per detection.
pub fn match_detections(dets: &[BBox], gts: &[BBox], thresh: f64) -> Vec<Option<usize>> {
    let ignore = vec![false; gts.len()];
    match_with_ignore(dets, gts, &ignore, thresh)
}

/// As [`match_detections`], but ignored gts are only taken when no regular
/// gt qualifies; a detection matched to an ignored gt is itself ignored.
fn match_with_ignore(dets: &[BBox], gts: &[BBox], ignore: &[bool], thresh: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for pass_ignored in [false, true] {
            for (j, gt) in gts.iter().enumerate() {
                if taken[j] || ignore[j] != pass_ignored {
                    continue;
                }
                let v = iou(d, gt);
                if v >= thresh && best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if best.is_some() {
                break;
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        out.push(best.map(|(j, _)| j));
    }
    out
}

/// Serialise NaN as `null` and back.
mod nan_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub mod vec {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|x| if x.is_nan() { None } else { Some(*x) }))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let v = Vec::<Option<f64>>::deserialize(d)?;
            Ok(v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub small: usize,
    pub medium: usize,
    pub large: usize,
}

/// Evaluation summary. Values lie in `[0, 1]`, or NaN (`null` in JSON) when
/// no ground truth falls in the relevant bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(with = "nan_null")]
    pub ap: f64,
    #[serde(with = "nan_null")]
    pub ap50: f64,
    #[serde(with = "nan_null")]
    pub ap75: f64,
    #[serde(with = "nan_null")]
    pub ap_s: f64,
    #[serde(with = "nan_null")]
    pub ap_m: f64,
    #[serde(with = "nan_null")]
    pub ap_l: f64,
    #[serde(with = "nan_null")]
    pub ar1: f64,
    #[serde(with = "nan_null")]
    pub ar10: f64,
    #[serde(with = "nan_null")]
    pub ar100: f64,
    #[serde(with = "nan_null")]
    pub ar_s: f64,
    #[serde(with = "nan_null")]
    pub ar_m: f64,
    #[serde(with = "nan_null")]
    pub ar_l: f64,
    /// AP per class (all areas, largest cap, averaged over IoU thresholds).
    #[serde(with = "nan_null::vec")]
    pub per_class_ap: Vec<f64>,
    /// Non-ignored ground-truth boxes per size bucket.
    pub gt_counts: BucketCounts,
    pub num_images: usize,
    pub num_detections: usize,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l", "ar1", "ar10", "ar100", "ar_s", "ar_m", "ar_l",
];

impl MetricReport {
    pub fn values(&self) -> [f64; 12] {
        [
            self.ap, self.ap50, self.ap75, self.ap_s, self.ap_m, self.ap_l, self.ar1, self.ar10, self.ar100,
            self.ar_s, self.ar_m, self.ar_l,
        ]
    }

    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    /// Values with six decimals; NaN prints as `nan`.
    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| if v.is_nan() { "nan".to_string() } else { format!("{:.6}", v) })
            .collect::<Vec<_>>()
            .join(",")
    }
}

struct ImageEntry<'a> {
    gts: Vec<(&'a BBox, usize, bool)>,
    /// Detections sorted by descending score (stable).
    dets: Vec<(BBox, usize, f64)>,
}

/// Precision at the 101 recall points and final recall for one
/// (class, IoU, area, cap) cell; `None` when there are no regular gts.
fn evaluate_cell(
    images: &[ImageEntry],
    class: usize,
    thresh: f64,
    area: (f64, f64),
    cap: usize,
) -> Option<(Vec<f64>, f64)> {
    let in_area = |b: &BBox| {
        let a = b.area();
        a >= area.0 && a < area.1
    };
    let mut npig = 0usize;
    // (score, is_tp) per counted detection
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for img in images {
        let dets: Vec<&(BBox, usize, f64)> = img.dets.iter().take(cap).filter(|d| d.1 == class).collect();
        let mut gts = Vec::new();
        let mut ignore = Vec::new();
        for &(b, c, ig) in &img.gts {
            if c != class {
                continue;
            }
            let ig = ig || !in_area(b);
            if !ig {
                npig += 1;
            }
            gts.push(*b);
            ignore.push(ig);
        }
        let boxes: Vec<BBox> = dets.iter().map(|d| d.0).collect();
        let m = match_with_ignore(&boxes, &gts, &ignore, thresh);
        for (d, mj) in dets.iter().zip(m) {
            let skip = match mj {
                Some(j) => ignore[j],
                None => !in_area(&d.0),
            };
            if !skip {
                scored.push((d.2, mj.is_some()));
            }
        }
    }
    if npig == 0 {
        return None;
    }
    // Stable sort keeps image order among equal scores.
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut rc = Vec::with_capacity(scored.len());
    let mut pr = Vec::with_capacity(scored.len());
    for &(_, is_tp) in &scored {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        rc.push(tp as f64 / npig as f64);
        pr.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..pr.len()).rev() {
        if pr[i] > pr[i - 1] {
            pr[i - 1] = pr[i];
        }
    }
    let mut q = vec![0.0; NUM_RECALL_POINTS];
    for (k, qk) in q.iter_mut().enumerate() {
        let r = k as f64 / (NUM_RECALL_POINTS - 1) as f64;
        // First index whose recall reaches r.
        let idx = rc.partition_point(|&x| x < r);
        if idx < pr.len() {
            *qk = pr[idx];
        }
    }
    let recall = rc.last().copied().unwrap_or(0.0);
    Some((q, recall))
}

fn mean_defined(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Evaluate detections against ground truth. Every detection record must
/// name an image present in `gts`; images without a record have no detections.
pub fn evaluate(dets: &[DetectionRecord], gts: &[AnnotationRecord], spec: &EvalSpec) -> Result<MetricReport> {
    let mut index = BTreeMap::new();
    for (i, r) in gts.iter().enumerate() {
        if index.insert(r.image_id, i).is_some() {
            return Err(TdmError::Invalid(format!("duplicate ground-truth image id {}", r.image_id)));
        }
        if let Some(b) = r.boxes.iter().find(|b| b.class_id >= spec.num_classes) {
            return Err(TdmError::Invalid(format!(
                "image {}: ground-truth class {} out of range",
                r.image_id, b.class_id
            )));
        }
    }
    let mut images: Vec<ImageEntry> = gts
        .iter()
        .map(|r| ImageEntry {
            gts: r.boxes.iter().map(|b| (&b.bbox, b.class_id, b.ignore)).collect(),
            dets: Vec::new(),
        })
        .collect();
    let mut num_detections = 0;
    for rec in dets {
        let Some(&i) = index.get(&rec.image_id) else {
            return Err(TdmError::Invalid(format!("detections for unknown image id {}", rec.image_id)));
        };
        for d in &rec.boxes {
            if d.class_id >= spec.num_classes || !d.score.is_finite() {
                return Err(TdmError::Invalid(format!(
                    "image {}: detection with class {} score {}",
                    rec.image_id, d.class_id, d.score
                )));
            }
            images[i].dets.push((d.bbox, d.class_id, d.score));
            num_detections += 1;
        }
    }
    for img in &mut images {
        img.dets.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
    }

    let areas = spec.area_ranges();
    let caps = spec.max_dets;
    let cap_max = caps[2];
    let t_idx = |t: f64| spec.iou_thresholds.iter().position(|x| (x - t).abs() < 1e-9);

    // cells[area][cap][class][iou] = (precision curve, recall)
    let mut cells = vec![vec![vec![vec![None; spec.iou_thresholds.len()]; spec.num_classes]; 3]; 4];
    for (ai, &a) in areas.iter().enumerate() {
        for (mi, &m) in caps.iter().enumerate() {
            if ai > 0 && m != cap_max {
                continue;
            }
            for c in 0..spec.num_classes {
                for (ti, &t) in spec.iou_thresholds.iter().enumerate() {
                    cells[ai][mi][c][ti] = evaluate_cell(&images, c, t, a, m);
                }
            }
        }
    }
    let ap_of = |ai: usize, ti: Option<usize>, class: Option<usize>| {
        mean_defined(
            cells[ai][2]
                .iter()
                .enumerate()
                .filter(|(c, _)| class.map_or(true, |k| k == *c))
                .flat_map(|(_, per_t)| per_t.iter().enumerate())
                .filter(|(t, _)| ti.map_or(true, |k| k == *t))
                .filter_map(|(_, cell)| cell.as_ref())
                .map(|(q, _)| q.iter().sum::<f64>() / NUM_RECALL_POINTS as f64),
        )
    };
    let ar_of = |ai: usize, mi: usize| {
        mean_defined(cells[ai][mi].iter().flatten().filter_map(|cell| cell.as_ref()).map(|(_, r)| *r))
    };
    let only = |t: f64| match t_idx(t) {
        Some(i) => ap_of(0, Some(i), None),
        None => f64::NAN,
    };

    let thresholds = area_thresholds(spec.size_scale);
    let mut gt_counts = BucketCounts::default();
    for img in &images {
        for (b, _, ig) in &img.gts {
            if *ig {
                continue;
            }
            match crate::synthdata::size_bucket(b.area(), thresholds) {
                0 => gt_counts.small += 1,
                1 => gt_counts.medium += 1,
                _ => gt_counts.large += 1,
            }
        }
    }
    Ok(MetricReport {
        ap: ap_of(0, None, None),
        ap50: only(0.5),
        ap75: only(0.75),
        ap_s: ap_of(1, None, None),
        ap_m: ap_of(2, None, None),
        ap_l: ap_of(3, None, None),
        ar1: ar_of(0, 0),
        ar10: ar_of(0, 1),
        ar100: ar_of(0, 2),
        ar_s: ar_of(1, 2),
        ar_m: ar_of(2, 2),
        ar_l: ar_of(3, 2),
        per_class_ap: (0..spec.num_classes).map(|c| ap_of(0, None, Some(c))).collect(),
        gt_counts,
        num_images: images.len(),
        num_detections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::Detection;
    use crate::synthdata::GtBox;

    fn gt(image_id: u64, boxes: &[(f64, f64, f64, f64, usize)]) -> AnnotationRecord {
        AnnotationRecord {
            image_id,
            file: String::new(),
            width: 100,
            height: 100,
            boxes: boxes
                .iter()
                .map(|&(x1, y1, x2, y2, c)| GtBox {
                    bbox: BBox::new(x1, y1, x2, y2),
                    class_id: c,
                    ignore: false,
                })
                .collect(),
        }
    }

    fn replay(g: &[AnnotationRecord]) -> Vec<DetectionRecord> {
        g.iter()
            .map(|r| DetectionRecord {
                image_id: r.image_id,
                boxes: r
                    .boxes
                    .iter()
                    .map(|b| Detection {
                        bbox: b.bbox,
                        class_id: b.class_id,
                        score: 1.0,
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn perfect_replay() {
        let g = vec![
            gt(0, &[(0.0, 0.0, 10.0, 10.0, 0), (20.0, 20.0, 60.0, 70.0, 1)]),
            gt(1, &[(5.0, 5.0, 30.0, 30.0, 1)]),
        ];
        let r = evaluate(&replay(&g), &g, &EvalSpec::new(2, 1.0)).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
        assert_eq!(r.ar100, 1.0);
        assert!(r.ap_l.is_nan());
        assert_eq!(r.gt_counts, BucketCounts { small: 2, medium: 1, large: 0 });
    }

    #[test]
    fn no_detections() {
        let g = vec![gt(0, &[(0.0, 0.0, 10.0, 10.0, 0)])];
        let r = evaluate(&[], &g, &EvalSpec::new(1, 1.0)).unwrap();
        assert_eq!((r.ap, r.ar1, r.ar100), (0.0, 0.0, 0.0));
    }

    #[test]
    fn duplicate_is_fp() {
        let g = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let d = [g[0], g[0]];
        assert_eq!(match_detections(&d, &g, 0.5), vec![Some(0), None]);
    }

    #[test]
    fn unknown_image() {
        let g = vec![gt(0, &[])];
        let d = vec![DetectionRecord {
            image_id: 5,
            boxes: vec![],
        }];
        assert!(evaluate(&d, &g, &EvalSpec::new(1, 1.0)).is_err());
    }

    #[test]
    fn nan_roundtrip_json() {
        let g = vec![gt(0, &[(0.0, 0.0, 10.0, 10.0, 0)])];
        let r = evaluate(&[], &g, &EvalSpec::new(1, 1.0)).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"ap_l\":null"));
        let back: MetricReport = serde_json::from_str(&s).unwrap();
        assert!(back.ap_l.is_nan() && back.ap == 0.0);
    }
}
