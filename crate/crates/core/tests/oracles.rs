mod common;

use common::*;
use proptest::prelude::*;
use tdm_core::detect::{iou, nms, BBox};
use tdm_core::metrics::match_detections;

#[test]
fn ops_match_references() {
    for run in oracle_suite(150, 11) {
        assert!(run.failure.is_none(), "{}: {}", run.name, run.failure.unwrap());
    }
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0i32..20, 0i32..20, 1i32..12, 1i32..12)
        .prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn nms_keeps_no_overlapping_pair(
        boxes in prop::collection::vec(arb_box(), 0..12),
        t in 0.1f64..0.9,
    ) {
        let scores: Vec<f64> = (0..boxes.len()).map(|i| ((i * 7) % 5) as f64).collect();
        let keep = nms(&boxes, &scores, t);
        for (x, &i) in keep.iter().enumerate() {
            for &j in &keep[x + 1..] {
                prop_assert!(iou(&boxes[i], &boxes[j]) <= t);
                prop_assert!(scores[i] >= scores[j]);
            }
        }
        // Every dropped box overlaps some kept box ranked above it.
        for i in 0..boxes.len() {
            if !keep.contains(&i) {
                prop_assert!(keep.iter().any(|&k| iou(&boxes[k], &boxes[i]) > t));
            }
        }
    }

    #[test]
    fn matching_is_injective(
        dets in prop::collection::vec(arb_box(), 0..8),
        gts in prop::collection::vec(arb_box(), 0..8),
        t in 0.05f64..0.95,
    ) {
        let m = match_detections(&dets, &gts, t);
        let mut seen = std::collections::BTreeSet::new();
        for (d, g) in m.iter().enumerate() {
            if let Some(g) = *g {
                prop_assert!(seen.insert(g));
                prop_assert!(iou(&dets[d], &gts[g]) >= t);
            }
        }
    }
}
