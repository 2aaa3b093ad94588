//! Hand-traced three-image, two-class metric fixture.

use rand::Rng;
use tdm_core::detect::{BBox, Detection, DetectionRecord};
use tdm_core::metrics::{evaluate, EvalSpec, MetricReport};
use tdm_core::synthdata::{AnnotationRecord, GtBox};

macro_rules! ensure {
    ($c:expr, $($m:tt)+) => {
        if !$c {
            return Err(format!($($m)+));
        }
    };
    ($c:expr) => {
        if !$c {
            return Err(stringify!($c).to_string());
        }
    };
}

pub fn gt(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, ignore: bool) -> GtBox {
    GtBox {
        bbox: BBox::new(x1, y1, x2, y2),
        class_id,
        ignore,
    }
}

pub fn det(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, score: f64) -> Detection {
    Detection {
        bbox: BBox::new(x1, y1, x2, y2),
        class_id,
        score,
    }
}

pub fn record(image_id: u64, boxes: Vec<GtBox>) -> AnnotationRecord {
    AnnotationRecord {
        image_id,
        file: format!("images/{:06}.ppm", image_id),
        width: 256,
        height: 256,
        boxes,
    }
}

/// Size thresholds at scale 1: small < 1024 <= medium < 9216 <= large.
pub fn fixture() -> (Vec<DetectionRecord>, Vec<AnnotationRecord>) {
    let gts = vec![
        record(1, vec![gt(0., 0., 10., 10., 0, false), gt(50., 50., 150., 150., 0, false)]),
        record(2, vec![gt(0., 0., 40., 40., 0, false), gt(100., 0., 200., 100., 1, false)]),
        record(3, vec![gt(10., 10., 30., 30., 1, false), gt(60., 60., 100., 100., 1, true)]),
    ];
    let dets = vec![
        DetectionRecord {
            image_id: 1,
            boxes: vec![
                det(200., 200., 210., 210., 0, 0.95),
                det(0., 0., 10., 10., 0, 0.9),
                det(50., 50., 150., 150., 0, 0.6),
            ],
        },
        DetectionRecord {
            image_id: 2,
            // IoU 0.6 with the class-0 gt.
            boxes: vec![det(0., 0., 40., 24., 0, 0.8), det(0., 0., 40., 40., 1, 0.4)],
        },
        DetectionRecord {
            image_id: 3,
            boxes: vec![det(60., 60., 100., 100., 1, 0.95), det(10., 10., 30., 30., 1, 0.5)],
        },
    ];
    (dets, gts)
}

/// Values traced by hand through 101-point interpolation.
pub fn expected() -> [f64; 12] {
    let c0 = (3.0 * 0.75 + 7.0 * 33.5 / 101.0) / 10.0;
    let c1 = 51.0 / 101.0;
    [
        (c0 + c1) / 2.0,
        (0.75 + c1) / 2.0,
        (33.5 / 101.0 + c1) / 2.0,
        0.75,
        0.3,
        0.5,
        0.05,
        19.0 / 30.0,
        19.0 / 30.0,
        1.0,
        0.3,
        0.5,
    ]
}

pub fn golden_report() -> MetricReport {
    let (dets, gts) = fixture();
    evaluate(&dets, &gts, &EvalSpec::new(2, 1.0)).unwrap()
}

/// Every gt reported back at score 1.
pub fn replay(gts: &[AnnotationRecord]) -> Vec<DetectionRecord> {
    gts.iter()
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

fn random_case(r: &mut rand_chacha::ChaCha8Rng, k: usize) -> (Vec<DetectionRecord>, Vec<AnnotationRecord>) {
    let gts: Vec<AnnotationRecord> = (0..r.gen_range(1..4))
        .map(|i| {
            let boxes = (0..r.gen_range(1..5))
                .map(|_| {
                    let b = super::rand_box(r, 120);
                    gt(b.x1, b.y1, b.x2, b.y2, r.gen_range(0..k), r.gen_bool(0.1))
                })
                .collect();
            record(i, boxes)
        })
        .collect();
    let dets = gts
        .iter()
        .map(|g| {
            let mut boxes = Vec::new();
            for b in &g.boxes {
                if !r.gen_bool(0.7) {
                    continue;
                }
                let mut j = |v: f64| v + r.gen_range(-3.0..3.0);
                let (x1, y1, x2, y2) = (j(b.bbox.x1), j(b.bbox.y1), j(b.bbox.x2), j(b.bbox.y2));
                let s = r.gen_range(0.05..1.0);
                boxes.push(det(x1, y1, x2.max(x1 + 1.0), y2.max(y1 + 1.0), b.class_id, s));
            }
            for _ in 0..r.gen_range(0..3) {
                let b = super::rand_box(r, 120);
                boxes.push(det(b.x1, b.y1, b.x2, b.y2, r.gen_range(0..k), r.gen_range(0.05..1.0)));
            }
            DetectionRecord {
                image_id: g.image_id,
                boxes,
            }
        })
        .collect();
    (dets, gts)
}

fn same(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-12
}

/// Random scenes with every invariant checked on each.
pub fn invariant_trials(trials: usize, seed: u64) -> Result<(), String> {
    let mut r = super::rng(seed);
    let k = 3;
    let spec = EvalSpec::new(k, 0.5);
    for trial in 0..trials {
        let (dets, gts) = random_case(&mut r, k);
        let base = evaluate(&dets, &gts, &spec).map_err(|e| e.to_string())?;
        let v = base.values();
        ensure!(v.iter().all(|x| x.is_nan() || (0.0..=1.0).contains(x)), "trial {}", trial);
        if !base.ar100.is_nan() {
            ensure!(base.ar1 <= base.ar10 + 1e-15 && base.ar10 <= base.ar100 + 1e-15, "trial {}", trial);
        }

        // Strictly monotone score transform.
        let mut warped = dets.clone();
        for d in warped.iter_mut().flat_map(|d| d.boxes.iter_mut()) {
            d.score = (3.0 * d.score).exp() - 0.5;
        }
        let w = evaluate(&warped, &gts, &spec).map_err(|e| e.to_string())?;
        for (a, b) in base.values().iter().zip(w.values()) {
            ensure!(same(*a, b), "trial {}: monotone transform changed {} -> {}", trial, a, b);
        }

        // A false positive below every score never raises AP.
        let mut extra = dets.clone();
        let c = r.gen_range(0..k);
        extra[0].boxes.push(det(200.0, 200.0, 230.0, 230.0, c, 0.001));
        let e = evaluate(&extra, &gts, &spec).map_err(|e| e.to_string())?;
        for (a, b) in base.values()[..6].iter().zip(&e.values()[..6]) {
            ensure!(a.is_nan() || *b <= *a + 1e-12, "trial {}: fp raised AP {} -> {}", trial, a, b);
        }
        for (a, b) in base.per_class_ap.iter().zip(&e.per_class_ap) {
            ensure!(a.is_nan() || *b <= *a + 1e-12);
        }

        // Dropping a class with no regular gt leaves the others' AP.
        let uncovered: Vec<usize> = (0..k)
            .filter(|&c| !gts.iter().flat_map(|g| &g.boxes).any(|b| b.class_id == c && !b.ignore))
            .collect();
        if let Some(&c) = uncovered.first() {
            let strip_d: Vec<DetectionRecord> = dets
                .iter()
                .map(|d| DetectionRecord {
                    image_id: d.image_id,
                    boxes: d.boxes.iter().filter(|b| b.class_id != c).cloned().collect(),
                })
                .collect();
            let strip_g: Vec<AnnotationRecord> = gts
                .iter()
                .map(|g| AnnotationRecord {
                    boxes: g.boxes.iter().filter(|b| b.class_id != c).cloned().collect(),
                    ..g.clone()
                })
                .collect();
            let s = evaluate(&strip_d, &strip_g, &spec).map_err(|e| e.to_string())?;
            for other in (0..k).filter(|&o| o != c) {
                ensure!(same(base.per_class_ap[other], s.per_class_ap[other]), "trial {}", trial);
            }
        }
    }
    Ok(())
}
