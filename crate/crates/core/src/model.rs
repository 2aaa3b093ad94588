//! Full detectors: a feature network variant plus RPN/RCN heads in one store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{backbone_forward, FeatureMap, ParamCount};
use crate::baselines::{
    build_no_lateral, init_skip_pool, no_lateral_from_features, skip_pool_forward, NoLateralNet,
    SkipPoolSpec, WidenPolicy,
};
use crate::config::ArchConfig;
use crate::detect::{
    detect_from_outputs, init_heads, match_and_sample, proposals, rcn_forward, rcn_loss, rpn_forward,
    rpn_loss, rpn_scores_and_deltas, sample_rois, BBox, Detection, DetectorConfig, HEAD_PREFIX,
};
use crate::error::{Result, TdmError};
use crate::params::ParamStore;
use crate::tdm::{build_stage, tdm_from_features, HeadPolicy, Stage, TdmNet};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Tdm,
    Baseline,
    SkipPool,
    NoLateral,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Tdm => "tdm",
            Variant::Baseline => "baseline",
            Variant::SkipPool => "skip-pool",
            Variant::NoLateral => "no-lateral",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "tdm" => Ok(Variant::Tdm),
            "baseline" => Ok(Variant::Baseline),
            "skip-pool" => Ok(Variant::SkipPool),
            "no-lateral" => Ok(Variant::NoLateral),
            _ => Err(TdmError::Invalid(format!("unknown variant {}", s))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which feature network feeds the heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureKind {
    /// TDM at a stage; stage 0 is the plain bottom-up baseline.
    Tdm(Stage),
    /// RPN on the top block, RCN on skip-pooled multi-block ROI features.
    SkipPool(SkipPoolSpec),
    /// Top-down-only modules with the given widths.
    NoLateral(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub arch: ArchConfig,
    pub kind: FeatureKind,
    pub params: ParamStore,
}

/// Loss terms of one training image plus their weighted total.
pub struct Losses {
    pub total: Var,
    pub rpn_cls: Var,
    pub rpn_box: Var,
    pub rcn_cls: Var,
    pub rcn_box: Var,
}

/// Loss values as plain numbers, in CSV column order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub rcn_cls: f64,
    pub rcn_box: f64,
}

impl Losses {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            total: g.scalar(self.total) as f64,
            rpn_cls: g.scalar(self.rpn_cls) as f64,
            rpn_box: g.scalar(self.rpn_box) as f64,
            rcn_cls: g.scalar(self.rcn_cls) as f64,
            rcn_box: g.scalar(self.rcn_box) as f64,
        }
    }
}

/// Forward products shared by training and inference.
pub struct Forward {
    pub feature: FeatureMap,
    pub taps: Vec<FeatureMap>,
}

/// Seed for head parameters created at `stage`; reinitialised heads differ
/// from the previous stage's even at equal shapes.
fn head_seed(seed: u64, stage: usize) -> u64 {
    seed ^ (stage as u64).wrapping_mul(0xa076_1d64_78bd_642f)
}

impl Detector {
    pub fn det_config(&self) -> Result<&DetectorConfig> {
        self.arch.detector()
    }

    pub fn variant(&self) -> Variant {
        match &self.kind {
            FeatureKind::Tdm(s) if s.pairs == 0 => Variant::Baseline,
            FeatureKind::Tdm(_) => Variant::Tdm,
            FeatureKind::SkipPool(_) => Variant::SkipPool,
            FeatureKind::NoLateral(_) => Variant::NoLateral,
        }
    }

    /// Stage index within the variant's schedule: active pairs for TDM and
    /// no-lateral, 0 for the baseline, 1 for skip-pool.
    pub fn stage(&self) -> usize {
        match &self.kind {
            FeatureKind::Tdm(s) => s.pairs,
            FeatureKind::SkipPool(_) => 1,
            FeatureKind::NoLateral(w) => w.len(),
        }
    }

    /// Channels of the feature the RPN consumes.
    pub fn rpn_channels(&self) -> usize {
        match &self.kind {
            FeatureKind::Tdm(s) => s.head_channels(),
            FeatureKind::SkipPool(_) => self.arch.backbone.top().channels,
            FeatureKind::NoLateral(w) => self.arch.tdm.pairs[w.len() - 1].t_out,
        }
    }

    /// Channels of the pooled ROI feature the RCN consumes.
    pub fn rcn_channels(&self) -> usize {
        match &self.kind {
            FeatureKind::SkipPool(s) => s.proj_channels,
            _ => self.rpn_channels(),
        }
    }

    /// Fresh stage-0 (bottom-up only) detector.
    pub fn baseline(arch: &ArchConfig, seed: u64) -> Result<Detector> {
        let cfg = arch.detector()?;
        let net = build_stage(arch, 0, None, seed)?;
        let mut params = net.params;
        let c = arch.backbone.top().channels;
        init_heads(&mut params, cfg, c, c, head_seed(seed, 0))?;
        Ok(Detector {
            arch: arch.clone(),
            kind: FeatureKind::Tdm(net.stage),
            params,
        })
    }

    /// Grow a baseline or TDM detector by one (L, T) pair. Heads are copied
    /// when the new `t_out` equals the old head width, otherwise reinitialised.
    pub fn grow_tdm(&self, seed: u64) -> Result<Detector> {
        let FeatureKind::Tdm(stage) = &self.kind else {
            return Err(TdmError::Invalid(format!("cannot grow TDM from {}", self.variant())));
        };
        let prev = TdmNet {
            arch: self.arch.clone(),
            stage: stage.clone(),
            params: self.params.clone(),
        };
        let net = build_stage(&self.arch, stage.pairs + 1, Some(&prev), seed)?;
        let mut params = net.params;
        self.attach_heads(&mut params, net.stage.head_policy, net.stage.head_channels(), net.stage.head_channels(), net.stage.pairs, seed)?;
        Ok(Detector {
            arch: self.arch.clone(),
            kind: FeatureKind::Tdm(net.stage),
            params,
        })
    }

    /// Grow the no-lateral variant; from a baseline this adds the first `~T`.
    pub fn grow_no_lateral(&self, policy: WidenPolicy, seed: u64) -> Result<Detector> {
        let (prev, k) = match &self.kind {
            FeatureKind::Tdm(s) if s.pairs == 0 => {
                let mut p = ParamStore::new();
                p.copy_prefix_from(&self.params, "backbone.");
                (
                    NoLateralNet {
                        arch: self.arch.clone(),
                        widths: vec![],
                        params: p,
                    },
                    1,
                )
            }
            FeatureKind::NoLateral(w) => (
                NoLateralNet {
                    arch: self.arch.clone(),
                    widths: w.clone(),
                    params: self.params.clone(),
                },
                w.len() + 1,
            ),
            _ => {
                return Err(TdmError::Invalid(format!(
                    "cannot grow no-lateral from {}",
                    self.variant()
                )))
            }
        };
        let net = build_no_lateral(&self.arch, k, Some(&prev), policy, seed)?;
        let t_out = self.arch.tdm.pairs[k - 1].t_out;
        let policy = if t_out == self.rpn_channels() {
            HeadPolicy::Reuse
        } else {
            HeadPolicy::Reinit
        };
        let mut params = net.params;
        self.attach_heads(&mut params, policy, t_out, t_out, k, seed)?;
        Ok(Detector {
            arch: self.arch.clone(),
            kind: FeatureKind::NoLateral(net.widths),
            params,
        })
    }

    /// Skip-pool detector built on a baseline: backbone and heads are copied.
    /// The rescale factor still needs [`crate::baselines::calibrate_skip_scale`].
    pub fn skip_pool_from(&self, spec: &SkipPoolSpec, seed: u64) -> Result<Detector> {
        if self.variant() != Variant::Baseline {
            return Err(TdmError::Invalid("skip-pool starts from a baseline detector".into()));
        }
        let mut params = ParamStore::new();
        params.copy_prefix_from(&self.params, "backbone.");
        init_skip_pool(&mut params, &self.arch, spec, seed)?;
        let c = self.arch.backbone.top().channels;
        let policy = if spec.proj_channels == c {
            HeadPolicy::Reuse
        } else {
            HeadPolicy::Reinit
        };
        let kind = FeatureKind::SkipPool(spec.clone());
        let probe = Detector {
            arch: self.arch.clone(),
            kind: kind.clone(),
            params: ParamStore::new(),
        };
        if policy == HeadPolicy::Reuse {
            params.copy_prefix_from(&self.params, HEAD_PREFIX);
        } else {
            init_heads(&mut params, self.det_config()?, c, probe.rcn_channels(), head_seed(seed, 1))?;
        }
        Ok(Detector {
            arch: self.arch.clone(),
            kind,
            params,
        })
    }

    fn attach_heads(
        &self,
        params: &mut ParamStore,
        policy: HeadPolicy,
        rpn_c: usize,
        rcn_c: usize,
        stage: usize,
        seed: u64,
    ) -> Result<()> {
        match policy {
            HeadPolicy::Reuse => params.copy_prefix_from(&self.params, HEAD_PREFIX),
            HeadPolicy::Reinit => init_heads(params, self.det_config()?, rpn_c, rcn_c, head_seed(seed, stage))?,
        }
        Ok(())
    }

    /// Feature-network parameters (everything except the heads).
    pub fn feature_param_count(&self) -> usize {
        self.params.iter().filter(|p| !p.name.starts_with(HEAD_PREFIX)).map(|p| p.numel()).sum()
    }

    pub fn count_params(&self) -> ParamCount {
        crate::backbone::count_store_params(&self.params)
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Forward> {
        let taps = backbone_forward(&self.arch.backbone, &self.params, g, image)?;
        let feature = match &self.kind {
            FeatureKind::Tdm(stage) => tdm_from_features(&self.arch, stage, &self.params, g, &taps)?,
            FeatureKind::SkipPool(_) => taps.last().expect("top is tapped").clone(),
            FeatureKind::NoLateral(w) => no_lateral_from_features(&self.arch, w, &self.params, g, &taps)?,
        };
        Ok(Forward { feature, taps })
    }

    /// Flattened ROI features `[R, D]` for the classifier.
    pub fn roi_features(&self, g: &mut Graph, fwd: &Forward, rois: &[BBox]) -> Result<Var> {
        let s = self.det_config()?.roi_size;
        match &self.kind {
            FeatureKind::SkipPool(spec) => {
                Ok(skip_pool_forward(g, &self.params, spec, &fwd.taps, rois, s)?.features)
            }
            _ => {
                let boxes: Vec<[f64; 4]> = rois.iter().map(|b| b.as_array()).collect();
                let f = &fwd.feature;
                let pooled = g.roi_pool(f.var, &boxes, f.stride as f64, s, s)?;
                let d = g.value(pooled).len() / rois.len().max(1);
                g.reshape(pooled, &[rois.len(), d])
            }
        }
    }

    /// Build the end-to-end training loss for one image.
    pub fn train_loss<R: Rng>(
        &self,
        g: &mut Graph,
        image: &Tensor,
        gts: &[BBox],
        classes: &[usize],
        rng: &mut R,
    ) -> Result<Losses> {
        let cfg = self.det_config()?.clone();
        let (h, w, _) = image.hwc()?;
        let (img_w, img_h) = (w as f64, h as f64);
        let x = g.input(image.clone());
        let fwd = self.forward(g, x)?;
        let rpn = rpn_forward(g, &self.params, &cfg, &fwd.feature)?;
        let sample = match_and_sample(&rpn.anchors, gts, &cfg.anchor_sampling(), rng)?;
        let (rpn_cls, rpn_box) = rpn_loss(g, &rpn, &sample)?;

        let (scores, deltas) = rpn_scores_and_deltas(g, &rpn);
        let props = proposals(&scores, &deltas, &rpn.anchors, img_w, img_h, &cfg.proposal_params(true))?;
        let mut rois: Vec<BBox> = props.into_iter().map(|p| p.bbox).collect();
        rois.extend(gts.iter().map(|b| b.clip(img_w, img_h)).filter(|b| b.width() > 0.0 && b.height() > 0.0));
        if rois.is_empty() {
            rois.push(BBox::new(0.0, 0.0, img_w, img_h));
        }
        let rs = sample_rois(&rois, gts, classes, &cfg.roi_sampling(), rng)?;
        let feats = self.roi_features(g, &fwd, &rs.rois)?;
        let rcn = rcn_forward(g, &self.params, &cfg, feats)?;
        let (rcn_cls, rcn_box) = rcn_loss(g, &rcn, &rs)?;
        let total = g.weighted_sum(&[(rpn_cls, 1.0), (rpn_box, 1.0), (rcn_cls, 1.0), (rcn_box, 1.0)])?;
        Ok(Losses {
            total,
            rpn_cls,
            rpn_box,
            rcn_cls,
            rcn_box,
        })
    }

    /// Inference on one `[H, W, 3]` image.
    pub fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let cfg = self.det_config()?;
        let (h, w, _) = image.hwc()?;
        let (img_w, img_h) = (w as f64, h as f64);
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let fwd = self.forward(&mut g, x)?;
        let rpn = rpn_forward(&mut g, &self.params, cfg, &fwd.feature)?;
        let (scores, deltas) = rpn_scores_and_deltas(&g, &rpn);
        let props = proposals(&scores, &deltas, &rpn.anchors, img_w, img_h, &cfg.proposal_params(false))?;
        if props.is_empty() {
            return Ok(vec![]);
        }
        let rois: Vec<BBox> = props.into_iter().map(|p| p.bbox).collect();
        let feats = self.roi_features(&mut g, &fwd, &rois)?;
        let rcn = rcn_forward(&mut g, &self.params, cfg, feats)?;
        detect_from_outputs(&g, cfg, &rcn, &rois, img_w, img_h)
    }

    /// Zero every lateral and top-down weight and bias (degenerate-path checks).
    pub fn zero_tdm_modules(&mut self) {
        for p in self.params.iter_mut() {
            if p.name.starts_with("tdm.L.") || p.name.starts_with("tdm.T.") {
                p.value.fill(0.0 as Real);
            }
        }
    }
}
