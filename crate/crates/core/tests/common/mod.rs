//! Test-side references: published architecture tables and brute-force
//! versions of the geometric ops, written from their definitions.

#![allow(dead_code)]

pub mod metric_fixture;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdm_core::detect::{BBox, ProposalParams};
use tdm_core::Tensor;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Block id, conv count, output (H, W, C).
pub type BlockRow = (&'static str, usize, (usize, usize, usize));
/// Top-down source, lateral target, t, l, t_out.
pub type PairRow = (&'static str, &'static str, usize, usize, usize);

pub const VGG16_BLOCKS: [BlockRow; 5] = [
    ("C1", 2, (300, 500, 64)),
    ("C2", 2, (150, 250, 128)),
    ("C3", 3, (75, 125, 256)),
    ("C4", 3, (37, 63, 512)),
    ("C5", 3, (37, 63, 512)),
];

pub const RESNET101_BLOCKS: [BlockRow; 4] = [
    ("C1", 1, (300, 500, 64)),
    ("C2", 9, (150, 250, 256)),
    ("C3", 12, (75, 125, 512)),
    ("C4", 69, (75, 125, 1024)),
];

pub const IRNV2_BLOCKS: [BlockRow; 5] = [
    ("Cx", 5, (71, 246, 192)),
    ("M5", 7, (35, 122, 320)),
    ("B10", 70, (35, 122, 320)),
    ("M6a", 3, (33, 120, 1088)),
    ("B20", 100, (33, 120, 1088)),
];

pub const VGG16_PAIRS: [PairRow; 4] = [
    ("C5", "C4", 128, 128, 256),
    ("C4", "C3", 64, 64, 128),
    ("C3", "C2", 64, 64, 128),
    ("C2", "C1", 64, 64, 128),
];

pub const RESNET101_PAIRS: [PairRow; 3] = [
    ("C4", "C3", 128, 128, 1024),
    ("C3", "C2", 128, 128, 1024),
    ("C2", "C1", 32, 32, 1024),
];

pub const IRNV2_PAIRS: [PairRow; 2] = [("B20", "M6a", 576, 512, 1088), ("M6a", "M5", 512, 256, 1088)];

pub fn published() -> Vec<(&'static str, Vec<BlockRow>, Vec<PairRow>)> {
    vec![
        ("vgg16.json", VGG16_BLOCKS.to_vec(), VGG16_PAIRS.to_vec()),
        ("resnet101.json", RESNET101_BLOCKS.to_vec(), RESNET101_PAIRS.to_vec()),
        ("irnv2.json", IRNV2_BLOCKS.to_vec(), IRNV2_PAIRS.to_vec()),
    ]
}

/// Compare `inspect` output for one published config with its table rows.
pub fn check_published(file: &str, blocks: &[BlockRow], pairs: &[PairRow]) -> Result<(), String> {
    let arch = tdm_core::ArchConfig::load(config_path(file)).map_err(|e| e.to_string())?;
    let rep = tdm_core::inspect::inspect(&arch).map_err(|e| e.to_string())?;
    if rep.blocks.len() != blocks.len() {
        return Err(format!("{}: {} blocks, want {}", file, rep.blocks.len(), blocks.len()));
    }
    for (b, &(id, n, dim)) in rep.blocks.iter().zip(blocks) {
        let got = (b.id.as_str(), b.num_convs, (b.height, b.width, b.channels));
        if got != (id, n, dim) {
            return Err(format!("{}: block {:?}, want {:?}", file, got, (id, n, dim)));
        }
    }
    if rep.pairs.len() != pairs.len() {
        return Err(format!("{}: {} pairs, want {}", file, rep.pairs.len(), pairs.len()));
    }
    for (p, &(from, to, t, l, t_out)) in rep.pairs.iter().zip(pairs) {
        let names = (format!("T.{}.{}", from, to), format!("L.{}", to));
        if (p.top_down.clone(), p.lateral.clone()) != names || (p.t, p.l, p.t_out) != (t, l, t_out) {
            return Err(format!(
                "{}: pair {} {} {}/{}/{}, want {:?}",
                file, p.top_down, p.lateral, p.t, p.l, p.t_out, (from, to, t, l, t_out)
            ));
        }
    }
    Ok(())
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

pub fn conv2d_ref(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize, dil: usize) -> Tensor {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, cout) = (w.shape()[0], w.shape()[3]);
    let span = dil * (k - 1) + 1;
    let oh = (h + 2 * pad - span) / stride + 1;
    let ow = (wd + 2 * pad - span) / stride + 1;
    let mut out = Tensor::zeros(&[oh, ow, cout]);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut s = b.data()[co];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky * dil) as isize - pad as isize;
                        let ix = (ox * stride + kx * dil) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            s += x.at3(iy as usize, ix as usize, ci) * w.data()[((ky * k + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out.data_mut()[(oy * ow + ox) * cout + co] = s;
            }
        }
    }
    out
}

/// 2x2 stride-2 max pool; `ceil` keeps the truncated last window per axis.
pub fn maxpool_ref(x: &Tensor, ceil: [bool; 2]) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = if ceil[0] { (h + 1) / 2 } else { h / 2 };
    let ow = if ceil[1] { (w + 1) / 2 } else { w / 2 };
    let mut out = Tensor::zeros(&[oh, ow, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut m = f64::NEG_INFINITY;
                for y in 0..h {
                    for x_ in 0..w {
                        if y / 2 == oy && x_ / 2 == ox {
                            m = m.max(x.at3(y, x_, ch) as f64);
                        }
                    }
                }
                out.data_mut()[(oy * ow + ox) * c + ch] = m as _;
            }
        }
    }
    out
}

/// Max over every feature cell whose unit square overlaps the bin's open
/// interval; empty bins are 0. Bins split the ROI extent (at least one cell)
/// evenly.
pub fn roi_pool_ref(x: &Tensor, rois: &[[f64; 4]], stride: f64, oh: usize, ow: usize) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[rois.len(), oh, ow, c]);
    let edges = |lo: f64, hi: f64, n: usize, p: usize| {
        let a = lo / stride;
        let ext = (hi / stride - a).max(1.0);
        (a + ext * p as f64 / n as f64, a + ext * (p + 1) as f64 / n as f64)
    };
    for (r, roi) in rois.iter().enumerate() {
        for py in 0..oh {
            let (y0, y1) = edges(roi[1], roi[3], oh, py);
            for px in 0..ow {
                let (x0, x1) = edges(roi[0], roi[2], ow, px);
                for ch in 0..c {
                    let mut m: Option<f64> = None;
                    for y in 0..h {
                        for x_ in 0..w {
                            let inside = (y as f64) < y1 && (y + 1) as f64 > y0 && (x_ as f64) < x1 && (x_ + 1) as f64 > x0;
                            if inside {
                                let v = x.at3(y, x_, ch) as f64;
                                m = Some(m.map_or(v, |m: f64| m.max(v)));
                            }
                        }
                    }
                    out.data_mut()[((r * oh + py) * ow + px) * c + ch] = m.unwrap_or(0.0) as _;
                }
            }
        }
    }
    out
}

/// IoU of integer-corner boxes by counting unit cells.
pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let lo = a.x1.min(b.x1).min(a.y1).min(b.y1) as i64;
    let hi = a.x2.max(b.x2).max(a.y2).max(b.y2) as i64;
    let inside = |bx: &BBox, x: i64, y: i64| {
        (x as f64) >= bx.x1 && ((x + 1) as f64) <= bx.x2 && (y as f64) >= bx.y1 && ((y + 1) as f64) <= bx.y2
    };
    let (mut inter, mut uni) = (0u64, 0u64);
    for y in lo..hi {
        for x in lo..hi {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            uni += (ia || ib) as u64;
        }
    }
    if inter == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Stable: equal scores keep index order.
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx
}

/// The kept set is the unique subset K where a box belongs to K exactly when
/// no higher-ranked member of K overlaps it above the threshold. Found by
/// enumerating all subsets; returned in rank order.
pub fn nms_ref(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let n = boxes.len();
    assert!(n <= 12, "subset enumeration is exponential");
    let order = rank_order(scores);
    let mut rank = vec![0; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let iou = |i: usize, j: usize| tdm_core::detect::iou(&boxes[i], &boxes[j]);
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let member = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| member(j) && rank[j] < rank[i] && iou(i, j) > thresh);
            member(i) == !blocked
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "fixed point must be unique");
    order.into_iter().filter(|&i| found[0] & (1 << i) != 0).collect()
}

pub fn decode_ref(a: &BBox, d: &[f64; 4], img_w: f64, img_h: f64) -> BBox {
    let (aw, ah) = (a.x2 - a.x1, a.y2 - a.y1);
    let (cx, cy) = (a.x1 + aw / 2.0 + d[0] * aw, a.y1 + ah / 2.0 + d[1] * ah);
    let cap = (1000.0f64 / 16.0).ln();
    let (w, h) = (aw * d[2].min(cap).exp(), ah * d[3].min(cap).exp());
    BBox::new(
        (cx - w / 2.0).clamp(0.0, img_w),
        (cy - h / 2.0).clamp(0.0, img_h),
        (cx + w / 2.0).clamp(0.0, img_w),
        (cy + h / 2.0).clamp(0.0, img_h),
    )
}

pub fn proposals_ref(
    scores: &[f64],
    deltas: &[[f64; 4]],
    anchors: &[BBox],
    img_w: f64,
    img_h: f64,
    p: &ProposalParams,
) -> Vec<(BBox, f64)> {
    let cand: Vec<(BBox, f64)> = anchors
        .iter()
        .zip(deltas)
        .zip(scores)
        .map(|((a, d), &s)| (decode_ref(a, d, img_w, img_h), s))
        .filter(|(b, _)| b.x2 - b.x1 > p.min_size && b.y2 - b.y1 > p.min_size)
        .collect();
    let order = rank_order(&cand.iter().map(|c| c.1).collect::<Vec<_>>());
    let top: Vec<(BBox, f64)> = order.into_iter().take(p.pre_nms).map(|i| cand[i]).collect();
    let boxes: Vec<BBox> = top.iter().map(|c| c.0).collect();
    let s: Vec<f64> = top.iter().map(|c| c.1).collect();
    nms_ref(&boxes, &s, p.nms_iou).into_iter().take(p.post_nms).map(|i| top[i]).collect()
}

/// Greedy matching written over the full pair list: pairs are visited by
/// detection, then IoU descending, then gt index; a pair is taken when both
/// sides are free and the IoU clears the threshold.
pub fn match_ref(dets: &[BBox], gts: &[BBox], thresh: f64) -> Vec<Option<usize>> {
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            pairs.push((i, j, tdm_core::detect::iou(d, g)));
        }
    }
    pairs.sort_by(|a, b| a.0.cmp(&b.0).then(b.2.partial_cmp(&a.2).unwrap()).then(a.1.cmp(&b.1)));
    let mut out = vec![None; dets.len()];
    let mut used = vec![false; gts.len()];
    for (i, j, v) in pairs {
        if out[i].is_none() && !used[j] && v >= thresh {
            out[i] = Some(j);
            used[j] = true;
        }
    }
    out
}

/// Box with integer corners inside `[0, extent]`.
pub fn rand_box(r: &mut ChaCha8Rng, extent: i64) -> BBox {
    let x1 = r.gen_range(0..extent - 1);
    let y1 = r.gen_range(0..extent - 1);
    let x2 = r.gen_range(x1 + 1..=extent);
    let y2 = r.gen_range(y1 + 1..=extent);
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

/// Scores drawn from a small set so ties occur.
pub fn rand_scores(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(0..8) as f64 / 8.0).collect()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

/// Outcome of one oracle family: cases run and the first mismatch.
pub struct OracleRun {
    pub name: &'static str,
    pub cases: usize,
    pub failure: Option<String>,
}

/// Randomised comparison of every geometric op with its reference.
pub fn oracle_suite(cases: usize, seed: u64) -> Vec<OracleRun> {
    use tdm_core::ops::{ConvGeometry, PoolRounding};
    use tdm_core::Graph;

    let mut runs = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<(), String>| {
        let mut r = rng(seed ^ name.len() as u64 * 0x9E37);
        let mut failure = None;
        for case in 0..cases {
            if let Err(e) = f(&mut r) {
                failure = Some(format!("case {}: {}", case, e));
                break;
            }
        }
        runs.push(OracleRun { name, cases, failure });
    };

    run("conv2d", &mut |r| {
        let (k, stride, pad, dil) = (
            [1, 3][r.gen_range(0..2)],
            r.gen_range(1..4),
            r.gen_range(0..3),
            r.gen_range(1..3),
        );
        let span = dil * (k - 1) + 1;
        let (h, w) = (r.gen_range(span.max(2)..9), r.gen_range(span.max(2)..9));
        let (cin, cout) = (r.gen_range(1..4), r.gen_range(1..4));
        let x = rand_tensor(r, &[h, w, cin]);
        let wt = rand_tensor(r, &[k, k, cin, cout]);
        let b = rand_tensor(r, &[cout]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(wt.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, wv, bv, ConvGeometry::new(stride, pad, dil)).map_err(|e| e.to_string())?;
        let d = max_abs_diff(g.value(y), &conv2d_ref(&x, &wt, &b, stride, pad, dil));
        (d <= 1e-12).then_some(()).ok_or(format!("max diff {:e}", d))
    });

    run("maxpool", &mut |r| {
        let (h, w, c) = (r.gen_range(2..9), r.gen_range(2..9), r.gen_range(1..3));
        let ceil = [r.gen_bool(0.5), r.gen_bool(0.5)];
        let x = rand_tensor(r, &[h, w, c]);
        let rd = |c: bool| if c { PoolRounding::Ceil } else { PoolRounding::Floor };
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = g.maxpool2x(xv, [rd(ceil[0]), rd(ceil[1])]).map_err(|e| e.to_string())?;
        let d = max_abs_diff(g.value(y), &maxpool_ref(&x, ceil));
        (d == 0.0).then_some(()).ok_or(format!("max diff {:e}", d))
    });

    run("roi_pool", &mut |r| {
        let (h, w, c) = (r.gen_range(2..8), r.gen_range(2..8), r.gen_range(1..3));
        let stride = [1.0, 2.0, 4.0][r.gen_range(0..3)];
        let (oh, ow) = (r.gen_range(1..4), r.gen_range(1..4));
        let x = rand_tensor(r, &[h, w, c]);
        let rois: Vec<[f64; 4]> = (0..r.gen_range(1..4))
            .map(|_| {
                let (iw, ih) = (w as f64 * stride, h as f64 * stride);
                let x1 = r.gen_range(0.0..iw - 0.5);
                let y1 = r.gen_range(0.0..ih - 0.5);
                [x1, y1, r.gen_range(x1 + 0.1..iw + 2.0), r.gen_range(y1 + 0.1..ih + 2.0)]
            })
            .collect();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = g.roi_pool(xv, &rois, stride, oh, ow).map_err(|e| e.to_string())?;
        let d = max_abs_diff(g.value(y), &roi_pool_ref(&x, &rois, stride, oh, ow));
        (d == 0.0).then_some(()).ok_or(format!("max diff {:e} rois {:?}", d, rois))
    });

    run("iou", &mut |r| {
        let (a, b) = (rand_box(r, 12), rand_box(r, 12));
        let (got, want) = (tdm_core::detect::iou(&a, &b), iou_ref(&a, &b));
        ((got - want).abs() <= 1e-12)
            .then_some(())
            .ok_or(format!("{:?} {:?}: {} vs {}", a, b, got, want))
    });

    run("nms", &mut |r| {
        let n = r.gen_range(0..9);
        let boxes: Vec<BBox> = (0..n).map(|_| rand_box(r, 10)).collect();
        let scores = rand_scores(r, n);
        let t = [0.0, 0.3, 0.5, 0.7][r.gen_range(0..4)];
        let (got, want) = (tdm_core::detect::nms(&boxes, &scores, t), nms_ref(&boxes, &scores, t));
        (got == want).then_some(()).ok_or(format!("{:?} vs {:?}", got, want))
    });

    run("proposals", &mut |r| {
        let n = r.gen_range(1..10);
        let anchors: Vec<BBox> = (0..n).map(|_| rand_box(r, 16)).collect();
        let deltas: Vec<[f64; 4]> = (0..n)
            .map(|_| [r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
            .collect();
        let scores = rand_scores(r, n);
        let p = ProposalParams {
            pre_nms: r.gen_range(1..10),
            post_nms: r.gen_range(1..10),
            nms_iou: 0.5,
            min_size: [0.0, 1.0, 3.0][r.gen_range(0..3)],
        };
        let got: Vec<(BBox, f64)> = tdm_core::detect::proposals(&scores, &deltas, &anchors, 16.0, 16.0, &p)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|q| (q.bbox, q.score))
            .collect();
        let want = proposals_ref(&scores, &deltas, &anchors, 16.0, 16.0, &p);
        let same = got.len() == want.len()
            && got.iter().zip(&want).all(|(a, b)| {
                a.1 == b.1 && a.0.as_array().iter().zip(b.0.as_array()).all(|(x, y)| (x - y).abs() <= 1e-12)
            });
        same.then_some(()).ok_or(format!("{:?} vs {:?}", got, want))
    });

    run("match_detections", &mut |r| {
        let (nd, ng) = (r.gen_range(0..7), r.gen_range(0..6));
        let dets: Vec<BBox> = (0..nd).map(|_| rand_box(r, 8)).collect();
        let gts: Vec<BBox> = (0..ng).map(|_| rand_box(r, 8)).collect();
        let t = [0.1, 0.5, 0.75][r.gen_range(0..3)];
        let (got, want) = (tdm_core::metrics::match_detections(&dets, &gts, t), match_ref(&dets, &gts, t));
        (got == want).then_some(()).ok_or(format!("{:?} vs {:?}", got, want))
    });

    runs
}

/// Progressive growth on toy4: head policy follows the `t_out` column,
/// reused heads are bitwise equal to the trained previous stage, and the
/// feature-network parameter count strictly increases.
pub fn growth_contract() -> Result<String, String> {
    use tdm_core::model::{Detector, FeatureKind};
    use tdm_core::synthdata::{gen_dataset, SceneSpec};
    use tdm_core::tdm::HeadPolicy;
    use tdm_core::train::{samples, train_stage, StageSchedule};

    let e = |e: tdm_core::TdmError| e.to_string();
    let arch = tdm_core::ArchConfig::load(config_path("toy4.json")).map_err(e)?;
    let data = samples(&gen_dataset(&SceneSpec::default(), 3, 5).map_err(e)?);
    let mut widths = vec![arch.backbone.top().channels];
    widths.extend(arch.tdm.pairs.iter().map(|p| p.t_out));
    let want: Vec<HeadPolicy> = widths
        .windows(2)
        .map(|w| if w[0] == w[1] { HeadPolicy::Reuse } else { HeadPolicy::Reinit })
        .collect();

    let mut det = Detector::baseline(&arch, 9).map_err(e)?;
    let mut counts = vec![det.feature_param_count()];
    let mut got = Vec::new();
    for k in 1..=arch.tdm.pairs.len() {
        let sched = StageSchedule::scaled(k - 1, 4, 1e-3);
        train_stage(&mut det, &data, &sched, 9, 0.9, &mut |_| Ok(())).map_err(e)?;
        let next = det.grow_tdm(9).map_err(e)?;
        let FeatureKind::Tdm(stage) = &next.kind else {
            return Err("grown detector is not TDM".into());
        };
        got.push(stage.head_policy);
        let heads = |d: &Detector| -> Vec<(String, Vec<u64>)> {
            d.params
                .iter()
                .filter(|p| p.name.starts_with("head."))
                .map(|p| (p.name.clone(), p.value.data().iter().map(|v| (*v as f64).to_bits()).collect()))
                .collect()
        };
        let same = heads(&det) == heads(&next);
        if (stage.head_policy == HeadPolicy::Reuse) != same {
            return Err(format!("stage {}: policy {:?} but heads equal = {}", k, stage.head_policy, same));
        }
        counts.push(next.feature_param_count());
        det = next;
    }
    if got != want {
        return Err(format!("head policies {:?}, want {:?}", got, want));
    }
    if !counts.windows(2).all(|w| w[0] < w[1]) {
        return Err(format!("feature params not increasing: {:?}", counts));
    }
    Ok(format!("policies {:?}, feature params {:?}", got, counts))
}

/// Anchor and loss-term counts of the RPN with application stride 8 on a
/// stride-2 map versus stride 1 on the stride-16 map of the same VGG16 input.
/// Returns `(anchors, loss terms)` per input size.
pub fn rpn_parity(inputs: &[(usize, usize)]) -> Result<Vec<((usize, usize), (usize, usize))>, String> {
    use tdm_core::backbone::{infer_shapes, FeatureMap};
    use tdm_core::detect::rpn_forward;
    use tdm_core::params::{add_conv, ParamStore};
    use tdm_core::Graph;

    let e = |e: tdm_core::TdmError| e.to_string();
    let arch = tdm_core::ArchConfig::load(config_path("vgg16.json")).map_err(e)?;
    let cfg = arch.detector().map_err(e)?.clone();
    let c = 8;
    let mut store = ParamStore::new();
    let a = cfg.num_anchors();
    add_conv(&mut store, "head.rpn.conv", 3, c, 4, 1.0, 0).map_err(e)?;
    add_conv(&mut store, "head.rpn.obj", 1, 4, 2 * a, 1.0, 0).map_err(e)?;
    add_conv(&mut store, "head.rpn.delta", 1, 4, 4 * a, 1.0, 0).map_err(e)?;
    let mut out = Vec::new();
    for &(h, w) in inputs {
        let shapes = infer_shapes(&arch.backbone, h, w).map_err(e)?;
        let fine = &shapes[0];
        let coarse = shapes.last().unwrap();
        if (fine.stride, coarse.stride) != (2, 16) {
            return Err(format!("strides {} / {}", fine.stride, coarse.stride));
        }
        let mut counts = [(0, 0); 2];
        for (i, s) in [fine, coarse].into_iter().enumerate() {
            let mut g = Graph::new();
            let var = g.input(Tensor::zeros(&[s.height, s.width, c]));
            let feat = FeatureMap {
                var,
                stride: s.stride,
                source: s.id.clone(),
            };
            let rpn = rpn_forward(&mut g, &store, &cfg, &feat).map_err(e)?;
            counts[i] = (rpn.anchors.len(), rpn.loss_terms());
        }
        if counts[0] != counts[1] {
            return Err(format!(
                "input {}x{}: stride-2 map {}x{} gives {:?} (anchors, loss terms), stride-16 map {}x{} gives {:?}",
                h, w, fine.height, fine.width, counts[0], coarse.height, coarse.width, counts[1]
            ));
        }
        out.push(((h, w), counts[0]));
    }
    Ok(out)
}

/// Small toy4 run: scratch init, stages 0..=2, a few iterations each.
pub fn tiny_experiment(data: &Path, out: &Path, seed: u64) -> tdm_core::experiment::ExperimentConfig {
    use tdm_core::experiment::{ExperimentConfig, InitKind};
    use tdm_core::train::{GrowOptions, PretrainConfig, StageSchedule, DEFAULT_MOMENTUM};
    ExperimentConfig {
        arch: config_path("toy4.json"),
        variant: tdm_core::model::Variant::Tdm,
        stages: (0..3).map(|k| StageSchedule::scaled(k, 5, 0.001)).collect(),
        seed,
        train_data: data.join("train"),
        val_data: Some(data.join("val")),
        output_dir: out.to_path_buf(),
        init: InitKind::Scratch,
        init_checkpoint: None,
        momentum: DEFAULT_MOMENTUM,
        pretrain: PretrainConfig::default(),
        grow: GrowOptions::default(),
        size_scale: 0.375,
    }
}

pub fn write_tiny_data(dir: &Path) {
    use tdm_core::synthdata::{gen_dataset, write_dataset, SceneSpec};
    let spec = SceneSpec::default();
    write_dataset(&dir.join("train"), &gen_dataset(&spec, 4, 11).unwrap()).unwrap();
    write_dataset(&dir.join("val"), &gen_dataset(&spec, 3, 9_000_011).unwrap()).unwrap();
}

const RUN_FILES: [&str; 7] = [
    "loss.csv",
    "report_stage0.json",
    "report_stage2.json",
    "dets_stage2.json",
    "tdm_stage0.ckpt",
    "tdm_stage1.ckpt",
    "tdm_stage2.ckpt",
];

fn same_files(a: &Path, b: &Path) -> Result<(), String> {
    for f in RUN_FILES {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{}: {}", f, e))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{}: {}", f, e))?;
        if x != y {
            return Err(format!("{} differs", f));
        }
    }
    Ok(())
}

/// Two runs of one config agree bitwise, and resuming from the stage-1
/// checkpoint reproduces the uninterrupted run.
pub fn determinism_contract() -> Result<String, String> {
    use tdm_core::experiment::{checkpoint_name, run_experiment};
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    write_tiny_data(&root.join("data"));
    let run = |name: &str| -> Result<std::path::PathBuf, String> {
        let out = root.join(name);
        run_experiment(&tiny_experiment(&root.join("data"), &out, 3), None).map_err(|e| e.to_string())?;
        Ok(out)
    };
    let a = run("a")?;
    let b = run("b")?;
    same_files(&a, &b)?;

    // Resume: copy the run, keep only the stage-1 state, finish it.
    let c = root.join("c");
    std::fs::create_dir_all(&c).map_err(|e| e.to_string())?;
    for f in ["loss.csv", "tdm_stage0.ckpt", "tdm_stage1.ckpt"] {
        std::fs::copy(a.join(f), c.join(f)).map_err(|e| e.to_string())?;
    }
    let ckpt = c.join(checkpoint_name(tdm_core::model::Variant::Tdm, 1));
    let mut cfg = tiny_experiment(&root.join("data"), &c, 3);
    cfg.output_dir = c.clone();
    run_experiment(&cfg, Some(&ckpt)).map_err(|e| e.to_string())?;
    for f in ["loss.csv", "report_stage2.json", "dets_stage2.json", "tdm_stage2.ckpt"] {
        let x = std::fs::read(a.join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(c.join(f)).map_err(|e| format!("{}: {}", f, e))?;
        if x != y {
            return Err(format!("resumed {} differs", f));
        }
    }
    Ok("repeat and resume are bitwise identical".into())
}
