//! Minimal two-stage detector: anchor-based region proposals (RPN) and a
//! region classifier (RCN) over one feature map.

mod anchors;
mod boxes;
mod heads;
mod nms;
mod sample;

pub use anchors::{anchor_center, gen_anchors, AnchorGrid};
pub use boxes::{decode, decode_raw, encode, iou, BBox, MAX_LOG_SCALE};
pub use heads::{
    detect_from_outputs, init_heads, rcn_forward, rcn_loss, rpn_forward, rpn_loss, rpn_scores_and_deltas,
    Detection, DetectionRecord, RcnOutput, RpnOutput, HEAD_PREFIX,
};
pub use nms::{nms, proposals, score_order, Proposal, ProposalParams};
pub use sample::{best_match, match_and_sample, sample_rois, AnchorSample, AnchorSampling, RoiSample, RoiSampling};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};

fn d_hidden() -> usize {
    512
}
fn d_ratios() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn d_256() -> usize {
    256
}
fn d_128() -> usize {
    128
}
fn d_half() -> f64 {
    0.5
}
fn d_quarter() -> f64 {
    0.25
}
fn d_07() -> f64 {
    0.7
}
fn d_03() -> f64 {
    0.3
}
fn d_01() -> f64 {
    0.1
}
fn d_scale() -> [f64; 4] {
    [10.0, 10.0, 5.0, 5.0]
}
fn d_2000() -> usize {
    2000
}
fn d_300() -> usize {
    300
}
fn d_1000() -> usize {
    1000
}
fn d_one() -> f64 {
    1.0
}
fn d_roi() -> usize {
    7
}
fn d_fc() -> Vec<usize> {
    vec![4096, 4096]
}
fn d_score() -> f64 {
    0.01
}
fn d_100() -> usize {
    100
}

/// Head sizes, matching thresholds and proposal budgets. Thresholds and
/// counts follow common two-stage detector conventions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Foreground classes; the classifier adds one background class.
    pub num_classes: usize,
    #[serde(default = "d_hidden")]
    pub rpn_hidden: usize,
    pub anchor_scales: Vec<f64>,
    #[serde(default = "d_ratios")]
    pub anchor_ratios: Vec<f64>,
    /// Feature stride at which the RPN runs densely; finer maps are sampled
    /// every `reference_stride / stride` cells.
    pub reference_stride: usize,
    #[serde(default = "d_256")]
    pub rpn_batch: usize,
    #[serde(default = "d_half")]
    pub rpn_pos_fraction: f64,
    #[serde(default = "d_07")]
    pub rpn_pos_iou: f64,
    #[serde(default = "d_03")]
    pub rpn_neg_iou: f64,
    #[serde(default = "d_128")]
    pub rcn_batch: usize,
    #[serde(default = "d_quarter")]
    pub rcn_fg_fraction: f64,
    #[serde(default = "d_half")]
    pub rcn_fg_iou: f64,
    #[serde(default = "d_01")]
    pub rcn_bg_iou_lo: f64,
    #[serde(default = "d_scale")]
    pub box_target_scale: [f64; 4],
    #[serde(default = "d_2000")]
    pub pre_nms_train: usize,
    #[serde(default = "d_300")]
    pub post_nms_train: usize,
    #[serde(default = "d_1000")]
    pub pre_nms_test: usize,
    #[serde(default = "d_300")]
    pub post_nms_test: usize,
    #[serde(default = "d_07")]
    pub rpn_nms_iou: f64,
    #[serde(default = "d_one")]
    pub min_proposal_size: f64,
    #[serde(default = "d_roi")]
    pub roi_size: usize,
    #[serde(default = "d_fc")]
    pub fc_dims: Vec<usize>,
    #[serde(default = "d_half")]
    pub det_nms_iou: f64,
    #[serde(default = "d_score")]
    pub score_thresh: f64,
    #[serde(default = "d_100")]
    pub max_dets: usize,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TdmError::Config(format!("detector: {}", m)));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.rpn_hidden == 0 || self.roi_size == 0 || self.fc_dims.is_empty() || self.fc_dims.contains(&0) {
            return bad("head sizes must be positive");
        }
        if self.anchor_scales.is_empty()
            || self.anchor_ratios.is_empty()
            || self.anchor_scales.iter().chain(&self.anchor_ratios).any(|v| !(*v > 0.0))
        {
            return bad("anchor scales and ratios must be non-empty and positive");
        }
        if self.reference_stride == 0 {
            return bad("reference_stride must be positive");
        }
        if self.rpn_batch == 0 || self.rcn_batch == 0 {
            return bad("sampling batches must be positive");
        }
        let unit = [
            self.rpn_pos_fraction,
            self.rpn_pos_iou,
            self.rpn_neg_iou,
            self.rcn_fg_fraction,
            self.rcn_fg_iou,
            self.rcn_bg_iou_lo,
            self.rpn_nms_iou,
            self.det_nms_iou,
            self.score_thresh,
        ];
        if unit.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("fractions and thresholds must lie in [0, 1]");
        }
        if self.rpn_neg_iou > self.rpn_pos_iou || self.rcn_bg_iou_lo > self.rcn_fg_iou {
            return bad("negative thresholds must not exceed positive thresholds");
        }
        if self.max_dets == 0 {
            return bad("max_dets must be positive");
        }
        Ok(())
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn application_stride(&self, feature_stride: usize) -> usize {
        (self.reference_stride / feature_stride.max(1)).max(1)
    }

    pub fn anchor_grid(&self, feature_stride: usize) -> AnchorGrid {
        AnchorGrid {
            stride: feature_stride,
            scales: self.anchor_scales.clone(),
            ratios: self.anchor_ratios.clone(),
            application_stride: self.application_stride(feature_stride),
        }
    }

    pub fn anchor_sampling(&self) -> AnchorSampling {
        AnchorSampling {
            batch: self.rpn_batch,
            pos_fraction: self.rpn_pos_fraction,
            pos_iou: self.rpn_pos_iou,
            neg_iou: self.rpn_neg_iou,
        }
    }

    pub fn roi_sampling(&self) -> RoiSampling {
        RoiSampling {
            batch: self.rcn_batch,
            fg_fraction: self.rcn_fg_fraction,
            fg_iou: self.rcn_fg_iou,
            bg_iou_lo: self.rcn_bg_iou_lo,
            target_scale: self.box_target_scale,
        }
    }

    pub fn proposal_params(&self, train: bool) -> ProposalParams {
        let (pre_nms, post_nms) = if train {
            (self.pre_nms_train, self.post_nms_train)
        } else {
            (self.pre_nms_test, self.post_nms_test)
        };
        ProposalParams {
            pre_nms,
            post_nms,
            nms_iou: self.rpn_nms_iou,
            min_size: self.min_proposal_size,
        }
    }
}
