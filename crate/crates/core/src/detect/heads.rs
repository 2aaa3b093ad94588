use serde::{Deserialize, Serialize};

use super::anchors::{gen_anchors, AnchorGrid};
use super::boxes::{decode, BBox};
use super::nms::{nms, score_order};
use super::sample::{AnchorSample, RoiSample};
use super::DetectorConfig;
use crate::autograd::{Graph, Var};
use crate::backbone::FeatureMap;
use crate::error::{Result, TdmError};
use crate::ops::{softmax_rows, ConvGeometry};
use crate::params::{add_conv, add_linear, ParamStore};
use crate::tensor::{Real, Tensor};

pub const HEAD_PREFIX: &str = "head.";

/// Allocate RPN and RCN parameters. `rcn_channels` is the channel count of
/// the pooled ROI feature.
pub fn init_heads(
    store: &mut ParamStore,
    cfg: &DetectorConfig,
    rpn_channels: usize,
    rcn_channels: usize,
    seed: u64,
) -> Result<()> {
    let a = cfg.num_anchors();
    add_conv(store, "head.rpn.conv", 3, rpn_channels, cfg.rpn_hidden, 1.0, seed)?;
    add_conv(store, "head.rpn.obj", 1, cfg.rpn_hidden, 2 * a, 0.1, seed)?;
    add_conv(store, "head.rpn.delta", 1, cfg.rpn_hidden, 4 * a, 0.1, seed)?;
    let mut d = cfg.roi_size * cfg.roi_size * rcn_channels;
    for (i, &h) in cfg.fc_dims.iter().enumerate() {
        add_linear(store, &format!("head.rcn.fc{}", i + 1), d, h, 1.0, seed)?;
        d = h;
    }
    let k = cfg.num_classes + 1;
    add_linear(store, "head.rcn.cls", d, k, 0.1, seed)?;
    add_linear(store, "head.rcn.bbox", d, 4 * k, 0.01, seed)
}

pub struct RpnOutput {
    /// Objectness logits `[N, 2]` (background, object), one row per anchor.
    pub obj: Var,
    /// Box deltas `[N, 4]`.
    pub deltas: Var,
    pub anchors: Vec<BBox>,
    pub grid: AnchorGrid,
    /// Head positions `(rows, cols)`.
    pub positions: (usize, usize),
}

impl RpnOutput {
    /// Number of per-anchor loss terms the head emits.
    pub fn loss_terms(&self) -> usize {
        self.anchors.len()
    }
}

fn conv(g: &mut Graph, params: &ParamStore, name: &str, x: Var, geom: ConvGeometry) -> Result<Var> {
    let w = g.param(params, &format!("{}.w", name))?;
    let b = g.param(params, &format!("{}.b", name))?;
    g.conv2d(x, w, b, geom)
}

fn linear(g: &mut Graph, params: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(params, &format!("{}.w", name))?;
    let b = g.param(params, &format!("{}.b", name))?;
    g.linear(x, w, b)
}

/// 3x3 conv (applied every `application_stride` cells) + ReLU, then sibling
/// 1x1 convs for objectness and deltas.
pub fn rpn_forward(g: &mut Graph, params: &ParamStore, cfg: &DetectorConfig, feat: &FeatureMap) -> Result<RpnOutput> {
    let grid = cfg.anchor_grid(feat.stride);
    let (h, w, _) = g.value(feat.var).hwc()?;
    let hid = conv(g, params, "head.rpn.conv", feat.var, ConvGeometry::new(grid.application_stride, 1, 1))?;
    let hid = g.relu(hid)?;
    let (ph, pw, _) = g.value(hid).hwc()?;
    debug_assert_eq!((ph, pw), (grid.positions(h), grid.positions(w)));
    let obj = conv(g, params, "head.rpn.obj", hid, ConvGeometry::new(1, 0, 1))?;
    let deltas = conv(g, params, "head.rpn.delta", hid, ConvGeometry::new(1, 0, 1))?;
    let anchors = gen_anchors(&grid, h, w);
    let n = anchors.len();
    let obj = g.reshape(obj, &[n, 2])?;
    let deltas = g.reshape(deltas, &[n, 4])?;
    Ok(RpnOutput {
        obj,
        deltas,
        anchors,
        grid,
        positions: (ph, pw),
    })
}

/// Object probability and raw deltas per anchor.
pub fn rpn_scores_and_deltas(g: &Graph, out: &RpnOutput) -> (Vec<f64>, Vec<[f64; 4]>) {
    let p = softmax_rows(g.value(out.obj));
    let scores = p.data().chunks_exact(2).map(|r| r[1] as f64).collect();
    let deltas = g
        .value(out.deltas)
        .data()
        .chunks_exact(4)
        .map(|d| [d[0] as f64, d[1] as f64, d[2] as f64, d[3] as f64])
        .collect();
    (scores, deltas)
}

/// Objectness cross-entropy over the sampled anchors and smooth-L1 over the
/// sampled positives, normalised by the sample size.
pub fn rpn_loss(g: &mut Graph, out: &RpnOutput, sample: &AnchorSample) -> Result<(Var, Var)> {
    let n = out.anchors.len();
    if sample.labels.len() != n {
        return Err(TdmError::shape("rpn_loss", "sample does not match the anchor set"));
    }
    let mut index = Vec::with_capacity(2 * sample.sampled.len());
    let mut labels = Vec::with_capacity(sample.sampled.len());
    for &i in &sample.sampled {
        index.extend([2 * i, 2 * i + 1]);
        labels.push(sample.labels[i] as usize);
    }
    let picked = g.gather(out.obj, index, &[sample.sampled.len(), 2])?;
    let cls = g.softmax_ce(picked, labels)?;
    let mut target = Tensor::zeros(&[n, 4]);
    let mut weight = Tensor::zeros(&[n, 4]);
    for &(i, t) in &sample.positives {
        for k in 0..4 {
            target.data_mut()[4 * i + k] = t[k] as Real;
            weight.data_mut()[4 * i + k] = 1.0;
        }
    }
    let reg = g.smooth_l1(out.deltas, target, Some(weight), sample.sampled.len() as Real)?;
    Ok((cls, reg))
}

pub struct RcnOutput {
    /// Class logits `[R, K + 1]`, background first.
    pub cls: Var,
    /// Class-specific deltas `[R, 4 (K + 1)]` in scaled target units.
    pub bbox: Var,
}

/// Fully connected layers (+ReLU) over flattened ROI features `[R, D]`.
pub fn rcn_forward(g: &mut Graph, params: &ParamStore, cfg: &DetectorConfig, roi_feats: Var) -> Result<RcnOutput> {
    let mut x = roi_feats;
    for i in 0..cfg.fc_dims.len() {
        let y = linear(g, params, &format!("head.rcn.fc{}", i + 1), x)?;
        x = g.relu(y)?;
    }
    let cls = linear(g, params, "head.rcn.cls", x)?;
    let bbox = linear(g, params, "head.rcn.bbox", x)?;
    Ok(RcnOutput { cls, bbox })
}

/// Classification cross-entropy and class-specific smooth-L1 over foreground
/// ROIs, normalised by the number of sampled ROIs.
pub fn rcn_loss(g: &mut Graph, out: &RcnOutput, sample: &RoiSample) -> Result<(Var, Var)> {
    let r = sample.labels.len();
    let cols = g.value(out.bbox).last_dim();
    let cls = g.softmax_ce(out.cls, sample.labels.clone())?;
    let mut target = Tensor::zeros(&[r, cols]);
    let mut weight = Tensor::zeros(&[r, cols]);
    for (i, (&l, t)) in sample.labels.iter().zip(&sample.targets).enumerate() {
        if l == 0 {
            continue;
        }
        for k in 0..4 {
            target.data_mut()[i * cols + 4 * l + k] = t[k] as Real;
            weight.data_mut()[i * cols + 4 * l + k] = 1.0;
        }
    }
    let reg = g.smooth_l1(out.bbox, target, Some(weight), r as Real)?;
    Ok((cls, reg))
}

/// One detection; serialises as `{x1, y1, x2, y2, class, score}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

/// Detections for one image: `{image_id, boxes: [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub boxes: Vec<Detection>,
}

/// Per-class decoding, score threshold and NMS, then the `max_dets` best overall.
pub fn detect_from_outputs(
    g: &Graph,
    cfg: &DetectorConfig,
    out: &RcnOutput,
    rois: &[BBox],
    img_w: f64,
    img_h: f64,
) -> Result<Vec<Detection>> {
    let probs = softmax_rows(g.value(out.cls));
    let k1 = probs.last_dim();
    let deltas = g.value(out.bbox);
    let s = cfg.box_target_scale;
    let mut dets = Vec::new();
    for c in 1..k1 {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (i, roi) in rois.iter().enumerate() {
            let p = probs.data()[i * k1 + c] as f64;
            if p < cfg.score_thresh {
                continue;
            }
            let d = &deltas.data()[i * 4 * k1 + 4 * c..i * 4 * k1 + 4 * c + 4];
            let d = [
                d[0] as f64 / s[0],
                d[1] as f64 / s[1],
                d[2] as f64 / s[2],
                d[3] as f64 / s[3],
            ];
            let b = decode(roi, &d, img_w, img_h)?;
            if b.width() > 0.0 && b.height() > 0.0 {
                boxes.push(b);
                scores.push(p);
            }
        }
        for i in nms(&boxes, &scores, cfg.det_nms_iou) {
            dets.push(Detection {
                bbox: boxes[i],
                class_id: c - 1,
                score: scores[i],
            });
        }
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut order = score_order(&scores);
    order.truncate(cfg.max_dets);
    Ok(order.into_iter().map(|i| dets[i].clone()).collect())
}
