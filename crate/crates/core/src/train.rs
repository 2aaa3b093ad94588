//! Stage-wise training, variant growth, classification pretraining and
//! dataset evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::backbone_forward;
use crate::baselines::{calibrate_skip_scale, SkipPoolSpec, WidenPolicy};
use crate::config::ArchConfig;
use crate::detect::{BBox, DetectionRecord};
use crate::error::{Result, TdmError};
use crate::metrics::{evaluate, EvalSpec, MetricReport};
use crate::model::{Detector, LossValues, Variant};
use crate::params::{add_linear, sgd_step, ParamStore};
use crate::synthdata::{gen_dataset, Dataset, SceneSpec};
use crate::tensor::{Real, Tensor};

/// One training image with its non-ignored ground truth.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: Tensor,
    pub gts: Vec<BBox>,
    pub classes: Vec<usize>,
}

pub fn samples(ds: &Dataset) -> Vec<TrainSample> {
    ds.images
        .iter()
        .zip(&ds.annotations)
        .map(|(img, rec)| {
            let keep: Vec<_> = rec.boxes.iter().filter(|b| !b.ignore).collect();
            TrainSample {
                image: img.to_tensor(),
                gts: keep.iter().map(|b| b.bbox).collect(),
                classes: keep.iter().map(|b| b.class_id).collect(),
            }
        })
        .collect()
}

pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Iterations and step-decayed learning rate for one stage. `pair_index` 0
/// is the bottom-up baseline; `k` trains the detector with `k` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub pair_index: usize,
    pub iterations: usize,
    pub lr: f64,
    #[serde(default)]
    pub decay_points: Vec<usize>,
}

impl StageSchedule {
    /// `iterations` with decays at 80% and 90%.
    pub fn scaled(pair_index: usize, iterations: usize, lr: f64) -> Self {
        StageSchedule {
            pair_index,
            iterations,
            lr,
            decay_points: vec![iterations * 4 / 5, iterations * 9 / 10],
        }
    }

    /// 3000 iterations, decays at 2400 and 2700.
    pub fn desk(pair_index: usize) -> Self {
        Self::scaled(pair_index, 3000, DEFAULT_LR)
    }

    /// `lr * 0.1^k`, `k` the number of decay points at or before `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let k = self.decay_points.iter().filter(|&&d| d <= iter).count();
        self.lr * 0.1f64.powi(k as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TdmError::Config(format!("stage {}: lr must be positive", self.pair_index)));
        }
        if let Some(d) = self.decay_points.iter().find(|&&d| d >= self.iterations) {
            return Err(TdmError::Config(format!(
                "stage {}: decay point {} is not below {} iterations",
                self.pair_index, d, self.iterations
            )));
        }
        Ok(())
    }
}

/// One line of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub stage: usize,
    pub iter: usize,
    pub lr: f64,
    pub values: LossValues,
}

impl LossRow {
    pub const CSV_HEADER: &'static str = "stage,iter,lr,total,rpn_cls,rpn_box,rcn_cls,rcn_box";

    /// Shortest round-trip formatting, so equal traces are equal text.
    pub fn csv_line(&self) -> String {
        let v = &self.values;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.stage, self.iter, self.lr, v.total, v.rpn_cls, v.rpn_box, v.rcn_cls, v.rcn_box
        )
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sampling stream for a stage: a pure function of the run seed and stage.
pub fn stage_rng(seed: u64, stage: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, 0x5747 + stage as u64))
}

/// One image per iteration, epochs reshuffled from the stage stream.
/// Momentum starts from zero at every stage.
pub fn train_stage(
    det: &mut Detector,
    data: &[TrainSample],
    sched: &StageSchedule,
    seed: u64,
    momentum: f64,
    sink: &mut dyn FnMut(&LossRow) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(TdmError::Invalid("training set is empty".into()));
    }
    sched.validate()?;
    det.params.reset_momentum();
    det.params.zero_grads();
    let mut rng = stage_rng(seed, sched.pair_index);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for it in 0..sched.iterations {
        if it % data.len() == 0 {
            order.shuffle(&mut rng);
        }
        let s = &data[order[it % data.len()]];
        let mut g = Graph::new();
        let losses = det.train_loss(&mut g, &s.image, &s.gts, &s.classes, &mut rng)?;
        let values = losses.values(&g);
        if !values.total.is_finite() {
            return Err(TdmError::NonFinite { op: "training loss" });
        }
        g.backward(losses.total)?;
        g.accumulate_param_grads(&mut det.params)?;
        let lr = sched.lr_at(it);
        sgd_step(&mut det.params, lr as Real, momentum as Real)?;
        if !det.params.all_finite() {
            return Err(TdmError::NonFinite { op: "sgd update" });
        }
        sink(&LossRow {
            stage: sched.pair_index,
            iter: it,
            lr,
            values,
        })?;
    }
    Ok(())
}

/// How variants grow beyond the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowOptions {
    #[serde(default)]
    pub skip_pool: Option<SkipPoolSpec>,
    #[serde(default = "d_widen")]
    pub widen: WidenPolicy,
    /// Training images whose gt boxes calibrate the skip-pool rescale.
    #[serde(default = "d_calib")]
    pub calibration_images: usize,
}

fn d_widen() -> WidenPolicy {
    WidenPolicy::Parity
}
fn d_calib() -> usize {
    16
}

impl Default for GrowOptions {
    fn default() -> Self {
        GrowOptions {
            skip_pool: None,
            widen: d_widen(),
            calibration_images: d_calib(),
        }
    }
}

/// Skip-pool over every tapped block, rescaled to the top block and
/// projected back to its width.
pub fn default_skip_pool(arch: &ArchConfig) -> SkipPoolSpec {
    let top = arch.backbone.top();
    SkipPoolSpec {
        source_blocks: arch.backbone.taps.clone(),
        ref_block: top.id.clone(),
        proj_channels: top.channels,
    }
}

/// Detector for stage `pair_index` of `variant`, grown from `det`.
pub fn advance(
    det: &Detector,
    variant: Variant,
    pair_index: usize,
    opts: &GrowOptions,
    calibration: &[TrainSample],
    seed: u64,
) -> Result<Detector> {
    let cur = det.stage();
    if pair_index == 0 {
        return if det.variant() == Variant::Baseline {
            Ok(det.clone())
        } else {
            Err(TdmError::Invalid(format!("stage 0 is the baseline, not {}", det.variant())))
        };
    }
    let step_ok = match (variant, det.variant()) {
        (Variant::SkipPool, Variant::Baseline) => pair_index == 1,
        (Variant::Tdm, Variant::Baseline | Variant::Tdm) => pair_index == cur + 1,
        (Variant::NoLateral, Variant::Baseline | Variant::NoLateral) => pair_index == cur + 1,
        _ => false,
    };
    if !step_ok {
        return Err(TdmError::Invalid(format!(
            "cannot reach {} stage {} from {} stage {}",
            variant,
            pair_index,
            det.variant(),
            cur
        )));
    }
    match variant {
        Variant::Tdm => det.grow_tdm(seed),
        Variant::NoLateral => det.grow_no_lateral(opts.widen, seed),
        Variant::SkipPool => {
            let spec = opts.skip_pool.clone().unwrap_or_else(|| default_skip_pool(&det.arch));
            let mut next = det.skip_pool_from(&spec, seed)?;
            let batch: Vec<(Tensor, Vec<BBox>)> = calibration
                .iter()
                .filter(|s| !s.gts.is_empty())
                .take(opts.calibration_images.max(1))
                .map(|s| (s.image.clone(), s.gts.clone()))
                .collect();
            let frozen = next.params.clone();
            let backbone = next.arch.backbone.clone();
            let roi = next.det_config()?.roi_size;
            calibrate_skip_scale(&mut next.params, &spec, roi, &batch, |g, x| {
                backbone_forward(&backbone, &frozen, g, x)
            })?;
            Ok(next)
        }
        Variant::Baseline => unreachable!("baseline only has stage 0"),
    }
}

/// Inference over a dataset, parallel over images, in dataset order.
pub fn detect_dataset(det: &Detector, ds: &Dataset) -> Result<Vec<DetectionRecord>> {
    ds.images
        .par_iter()
        .zip(ds.annotations.par_iter())
        .map(|(img, rec)| {
            Ok(DetectionRecord {
                image_id: rec.image_id,
                boxes: det.detect(&img.to_tensor())?,
            })
        })
        .collect()
}

pub fn evaluate_detector(det: &Detector, ds: &Dataset, size_scale: f64) -> Result<(Vec<DetectionRecord>, MetricReport)> {
    let dets = detect_dataset(det, ds)?;
    let spec = EvalSpec::new(det.det_config()?.num_classes, size_scale);
    let report = evaluate(&dets, &ds.annotations, &spec)?;
    Ok((dets, report))
}

fn d_pre_images() -> usize {
    500
}
fn d_epochs() -> usize {
    10
}
fn d_pre_lr() -> f64 {
    0.001
}

/// Shape classification on single-object scenes; stands in for the
/// large-scale classification pretraining of the bottom-up network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    #[serde(default = "d_pre_images")]
    pub images: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_pre_lr")]
    pub lr: f64,
    #[serde(default)]
    pub scene: SceneSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            images: d_pre_images(),
            epochs: d_epochs(),
            lr: d_pre_lr(),
            scene: SceneSpec::default(),
        }
    }
}

pub const CLASSIFIER_HEAD: &str = "cls.fc";

/// Backbone plus global max pooling and a linear layer.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub arch: ArchConfig,
    pub num_classes: usize,
    pub params: ParamStore,
}

impl Classifier {
    pub fn new(arch: &ArchConfig, num_classes: usize, seed: u64) -> Result<Classifier> {
        let mut params = crate::backbone::build_backbone(&arch.backbone, seed)?.params;
        add_linear(&mut params, CLASSIFIER_HEAD, arch.backbone.top().channels, num_classes, 1.0, seed)?;
        Ok(Classifier {
            arch: arch.clone(),
            num_classes,
            params,
        })
    }

    pub fn logits(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        let (h, w, _) = image.hwc()?;
        let x = g.input(image.clone());
        let taps = backbone_forward(&self.arch.backbone, &self.params, g, x)?;
        let top = taps.last().expect("top is tapped");
        let pooled = g.roi_pool(top.var, &[[0.0, 0.0, w as f64, h as f64]], top.stride as f64, 1, 1)?;
        let c = g.value(pooled).len();
        let flat = g.reshape(pooled, &[1, c])?;
        let wv = g.param(&self.params, &format!("{}.w", CLASSIFIER_HEAD))?;
        let bv = g.param(&self.params, &format!("{}.b", CLASSIFIER_HEAD))?;
        g.linear(flat, wv, bv)
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let mut g = Graph::new();
        let l = self.logits(&mut g, image)?;
        let row = g.value(l).data();
        Ok((0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best }))
    }

    /// Fresh baseline detector whose bottom-up weights come from this model.
    pub fn to_baseline(&self, seed: u64) -> Result<Detector> {
        let mut det = Detector::baseline(&self.arch, seed)?;
        det.params.copy_prefix_from(&self.params, "backbone.");
        Ok(det)
    }
}

/// Train a classifier for `cfg.epochs` passes over single-object scenes.
/// Returns the model and its accuracy over the last epoch.
pub fn pretrain_classifier(arch: &ArchConfig, cfg: &PretrainConfig, seed: u64) -> Result<(Classifier, f64)> {
    let scene = SceneSpec {
        objects_per_scene: [1, 1],
        ..cfg.scene.clone()
    };
    let ds = gen_dataset(&scene, cfg.images, mix(seed, 0xc1a5))?;
    let data: Vec<(Tensor, usize)> = ds
        .images
        .iter()
        .zip(&ds.annotations)
        .filter_map(|(img, rec)| rec.boxes.first().map(|b| (img.to_tensor(), b.class_id)))
        .collect();
    if data.is_empty() {
        return Err(TdmError::Invalid("pretraining set has no objects".into()));
    }
    let mut model = Classifier::new(arch, scene.num_classes(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xc1a6));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        correct = 0;
        let lr = if epoch * 10 >= cfg.epochs * 8 { cfg.lr * 0.1 } else { cfg.lr };
        for &i in &order {
            let (img, label) = &data[i];
            let mut g = Graph::new();
            let logits = model.logits(&mut g, img)?;
            let row = g.value(logits).data();
            let pred = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            correct += (pred == *label) as usize;
            let loss = g.softmax_ce(logits, vec![*label])?;
            if !g.scalar(loss).is_finite() {
                return Err(TdmError::NonFinite { op: "pretraining loss" });
            }
            g.backward(loss)?;
            g.accumulate_param_grads(&mut model.params)?;
            sgd_step(&mut model.params, lr as Real, DEFAULT_MOMENTUM as Real)?;
        }
    }
    Ok((model, correct as f64 / data.len() as f64))
}
