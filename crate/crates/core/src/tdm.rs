//! Top-down modulation: lateral modules `L_i`, top-down modules `T_{j,i}`,
//! output modules `T_out`, and progressive growth of the hierarchy.
//!
//! Wiring for the `k` lowest active pairs, walking down from the top block:
//!
//! ```text
//! x^T_top = x^C_top                                 (identity top module)
//! x^L_i   = relu(conv3x3(x^C_i))                    (L_i)
//! x^T_i   = up(relu(conv3x3(x^T_j ++ x^L_i)))       (T_{j,i}; `++` = channel concat)
//! out     = T_out(x^T_i ++ x^L_i)                   (lowest pair only)
//! ```
//!
//! `up` resizes to the next active lateral's resolution when the pair's
//! `upsample` flag is set and a lower pair is active; the lowest pair never
//! upsamples. `T_out` is an optional 1x1 conv + ReLU to `t_out` channels, and
//! the identity when `t + l == t_out`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{backbone_forward, conv_param_count, count_store_params, infer_shapes, init_backbone_params, BlockShape, FeatureMap, ParamCount};
use crate::config::{ArchConfig, PairSpec};
use crate::error::{Result, TdmError};
use crate::ops::ConvGeometry;
use crate::params::{add_conv, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LateralSpec {
    pub source_block: String,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopDownSpec {
    pub from: String,
    pub to: String,
    pub out_channels: usize,
    pub upsample: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToutSpec {
    pub out_channels: usize,
    pub use_1x1: bool,
}

impl PairSpec {
    pub fn lateral(&self) -> LateralSpec {
        LateralSpec {
            source_block: self.to.clone(),
            out_channels: self.l,
        }
    }

    pub fn top_down(&self) -> TopDownSpec {
        TopDownSpec {
            from: self.from.clone(),
            to: self.to.clone(),
            out_channels: self.t,
            upsample: self.upsample,
        }
    }

    pub fn tout(&self) -> ToutSpec {
        ToutSpec {
            out_channels: self.t_out,
            use_1x1: self.use_1x1,
        }
    }
}

pub fn lateral_name(to: &str) -> String {
    format!("tdm.L.{}", to)
}

pub fn topdown_name(from: &str, to: &str) -> String {
    format!("tdm.T.{}.{}", from, to)
}

pub fn tout_name(to: &str) -> String {
    format!("tdm.out.{}", to)
}

/// Structural checks run on config load.
pub fn validate_pairs(arch: &ArchConfig) -> Result<()> {
    let bb = &arch.backbone;
    let taps = bb.tap_indices();
    let mut above = bb.blocks.len() - 1;
    for (k, p) in arch.tdm.pairs.iter().enumerate() {
        let from = bb
            .block_index(&p.from)
            .ok_or_else(|| TdmError::Config(format!("pair {}: unknown block {}", k, p.from)))?;
        let to = bb
            .block_index(&p.to)
            .ok_or_else(|| TdmError::Config(format!("pair {}: unknown block {}", k, p.to)))?;
        if from != above {
            return Err(TdmError::Config(format!(
                "pair {} must start at {} to stay contiguous from the top",
                k, bb.blocks[above].id
            )));
        }
        if to >= from {
            return Err(TdmError::Config(format!(
                "pair {}: {} is not below {}",
                k, p.to, p.from
            )));
        }
        if !taps.contains(&to) {
            return Err(TdmError::Config(format!(
                "pair {}: lateral source {} is not tapped",
                k, p.to
            )));
        }
        if p.t == 0 || p.l == 0 || p.t_out == 0 {
            return Err(TdmError::Config(format!("pair {}: channel counts must be positive", k)));
        }
        if !p.use_1x1 && p.t + p.l != p.t_out {
            return Err(TdmError::Config(format!(
                "pair {}: t + l = {} differs from t_out = {} but use_1x1 is off",
                k,
                p.t + p.l,
                p.t_out
            )));
        }
        above = to;
    }
    Ok(())
}

/// Design-principle warnings (lateral and top-down modules should reduce
/// dimensionality). Never fatal.
pub fn design_warnings(arch: &ArchConfig) -> Vec<String> {
    let mut out = Vec::new();
    let bb = &arch.backbone;
    let mut td = bb.top().channels;
    for p in &arch.tdm.pairs {
        let Some(i) = bb.block_index(&p.to) else { continue };
        let k = bb.blocks[i].channels;
        if p.l >= k {
            out.push(format!(
                "L.{}: l = {} does not reduce the {}-d bottom-up feature",
                p.to, p.l, k
            ));
        }
        if p.t >= td + p.l {
            out.push(format!(
                "T.{}.{}: t = {} does not reduce its {}-d concatenated input",
                p.from,
                p.to,
                p.t,
                td + p.l
            ));
        }
        td = p.t;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPolicy {
    Reuse,
    Reinit,
}

/// Progressive-training state: the `pairs` lowest... i.e. the first `pairs`
/// configured (L, T) pairs counted from the top are active.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub pairs: usize,
    pub tout: ToutSpec,
    pub head_policy: HeadPolicy,
}

impl Stage {
    /// Stage 0: no pairs; the detector reads `x^C_top` directly.
    pub fn initial(arch: &ArchConfig) -> Stage {
        Stage {
            pairs: 0,
            tout: ToutSpec {
                out_channels: arch.backbone.top().channels,
                use_1x1: false,
            },
            head_policy: HeadPolicy::Reinit,
        }
    }

    pub fn at(arch: &ArchConfig, pairs: usize) -> Result<Stage> {
        let mut s = Stage::initial(arch);
        while s.pairs < pairs {
            s = grow_stage(arch, &s)?;
        }
        Ok(s)
    }

    /// Channels of the feature the detector heads consume.
    pub fn head_channels(&self) -> usize {
        self.tout.out_channels
    }

    pub fn active_pairs<'a>(&self, arch: &'a ArchConfig) -> &'a [PairSpec] {
        &arch.tdm.pairs[..self.pairs]
    }
}

/// Add the next pair; heads are reused iff the detector input width is unchanged.
pub fn grow_stage(arch: &ArchConfig, stage: &Stage) -> Result<Stage> {
    let next = arch.tdm.pairs.get(stage.pairs).ok_or_else(|| {
        TdmError::Invalid(format!(
            "{} has {} pairs; cannot grow past stage {}",
            arch.name,
            arch.tdm.pairs.len(),
            stage.pairs
        ))
    })?;
    let tout = next.tout();
    let head_policy = if tout.out_channels == stage.tout.out_channels {
        HeadPolicy::Reuse
    } else {
        HeadPolicy::Reinit
    };
    Ok(Stage {
        pairs: stage.pairs + 1,
        tout,
        head_policy,
    })
}

fn init_pair(store: &mut ParamStore, arch: &ArchConfig, k: usize, seed: u64) -> Result<()> {
    let p = &arch.tdm.pairs[k];
    let bb = &arch.backbone;
    let src = &bb.blocks[bb.block_index(&p.to).expect("validated")];
    let td_in = if k == 0 {
        bb.top().channels
    } else {
        arch.tdm.pairs[k - 1].t
    };
    add_conv(store, &lateral_name(&p.to), 3, src.channels, p.l, 1.0, seed)?;
    add_conv(store, &topdown_name(&p.from, &p.to), 3, td_in + p.l, p.t, 1.0, seed)
}

fn init_tout(store: &mut ParamStore, arch: &ArchConfig, k: usize, seed: u64) -> Result<()> {
    let p = &arch.tdm.pairs[k];
    if p.use_1x1 {
        add_conv(store, &tout_name(&p.to), 1, p.t + p.l, p.t_out, 1.0, seed)?;
    }
    Ok(())
}

/// Feature hierarchy (backbone + active TDM modules) at one stage.
#[derive(Clone, Debug)]
pub struct TdmNet {
    pub arch: ArchConfig,
    pub stage: Stage,
    pub params: ParamStore,
}

/// Build the stage-`k` network. Parameters of earlier stages are copied from
/// `prev` unchanged; the new pair and its `T_out` are freshly initialised.
/// `prev` may be omitted only for `k <= 1`.
pub fn build_stage(arch: &ArchConfig, k: usize, prev: Option<&TdmNet>, seed: u64) -> Result<TdmNet> {
    if k > arch.tdm.pairs.len() {
        return Err(TdmError::Invalid(format!(
            "stage {} requested but {} has {} pairs",
            k,
            arch.name,
            arch.tdm.pairs.len()
        )));
    }
    let stage = Stage::at(arch, k)?;
    let mut params = ParamStore::new();
    match prev {
        Some(prev) => {
            if k == 0 || prev.stage.pairs != k - 1 {
                return Err(TdmError::Invalid(format!(
                    "stage {} must grow from stage {}, got stage {}",
                    k,
                    k.saturating_sub(1),
                    prev.stage.pairs
                )));
            }
            params.copy_prefix_from(&prev.params, "backbone.");
            params.copy_prefix_from(&prev.params, "tdm.");
            params.remove_prefix("tdm.out.");
            init_pair(&mut params, arch, k - 1, seed)?;
        }
        None => {
            if k > 1 {
                return Err(TdmError::Invalid(format!(
                    "stage {} needs the stage {} parameters",
                    k,
                    k - 1
                )));
            }
            init_backbone_params(&arch.backbone, &mut params, seed)?;
            if k == 1 {
                init_pair(&mut params, arch, 0, seed)?;
            }
        }
    }
    if k > 0 {
        init_tout(&mut params, arch, k - 1, seed)?;
    }
    Ok(TdmNet {
        arch: arch.clone(),
        stage,
        params,
    })
}

impl TdmNet {
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<FeatureMap> {
        tdm_forward(&self.arch, &self.stage, &self.params, g, image)
    }

    pub fn count_params(&self) -> ParamCount {
        count_store_params(&self.params)
    }
}

fn conv_relu(
    g: &mut Graph,
    params: &ParamStore,
    name: &str,
    x: Var,
    pad: usize,
) -> Result<Var> {
    let w = g.param(params, &format!("{}.w", name))?;
    let b = g.param(params, &format!("{}.b", name))?;
    let y = g.conv2d(x, w, b, ConvGeometry::new(1, pad, 1))?;
    g.relu(y)
}

/// `x^L = relu(conv3x3(x^C))`.
pub fn lateral_forward(g: &mut Graph, params: &ParamStore, spec: &LateralSpec, x_c: Var) -> Result<Var> {
    conv_relu(g, params, &lateral_name(&spec.source_block), x_c, 1)
}

/// `relu(conv3x3(x^T_j ++ x^L_i))`, resized to `upsample_to` when given.
pub fn topdown_forward(
    g: &mut Graph,
    params: &ParamStore,
    spec: &TopDownSpec,
    x_t: Var,
    x_l: Var,
    upsample_to: Option<(usize, usize)>,
) -> Result<Var> {
    let a = g.concat(x_t, x_l)?;
    let y = conv_relu(g, params, &topdown_name(&spec.from, &spec.to), a, 1)?;
    match upsample_to {
        Some((h, w)) => g.upsample(y, h, w),
        None => Ok(y),
    }
}

/// Optional 1x1 conv + ReLU to `t_out` channels; identity otherwise.
pub fn tout_forward(
    g: &mut Graph,
    params: &ParamStore,
    spec: &ToutSpec,
    to: &str,
    x: Var,
) -> Result<Var> {
    if spec.use_1x1 {
        return conv_relu(g, params, &tout_name(to), x, 0);
    }
    let c = g.value(x).last_dim();
    if c != spec.out_channels {
        return Err(TdmError::shape(
            "tout",
            format!("{} channels but t_out = {} and no 1x1 projection", c, spec.out_channels),
        ));
    }
    Ok(x)
}

/// Final detector feature at `stage`; stage 0 returns `x^C_top` itself.
pub fn tdm_forward(
    arch: &ArchConfig,
    stage: &Stage,
    params: &ParamStore,
    g: &mut Graph,
    image: Var,
) -> Result<FeatureMap> {
    let feats = backbone_forward(&arch.backbone, params, g, image)?;
    tdm_from_features(arch, stage, params, g, &feats)
}

pub fn find_feature<'a>(feats: &'a [FeatureMap], id: &str) -> Result<&'a FeatureMap> {
    feats
        .iter()
        .find(|f| f.source == id)
        .ok_or_else(|| TdmError::Config(format!("block {} is not tapped", id)))
}

pub fn tdm_from_features(
    arch: &ArchConfig,
    stage: &Stage,
    params: &ParamStore,
    g: &mut Graph,
    feats: &[FeatureMap],
) -> Result<FeatureMap> {
    let top = feats.last().expect("top block is always tapped").clone();
    let pairs = stage.active_pairs(arch);
    if pairs.is_empty() {
        return Ok(top);
    }
    let mut x_t = top.var;
    for (k, p) in pairs.iter().enumerate() {
        let x_c = find_feature(feats, &p.to)?;
        let x_l = lateral_forward(g, params, &p.lateral(), x_c.var)?;
        let last = k + 1 == pairs.len();
        let target = if !last && p.upsample {
            let next = find_feature(feats, &pairs[k + 1].to)?;
            let (h, w, _) = g.value(next.var).hwc()?;
            Some((h, w))
        } else {
            None
        };
        let y = topdown_forward(g, params, &p.top_down(), x_t, x_l, target)?;
        if last {
            let a = g.concat(y, x_l)?;
            let out = tout_forward(g, params, &stage.tout, &p.to, a)?;
            return Ok(FeatureMap {
                var: out,
                stride: x_c.stride,
                source: p.to.clone(),
            });
        }
        x_t = y;
    }
    unreachable!("loop returns on the last pair")
}

/// One row of the shape-level wiring walk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WiringRow {
    pub top_down: String,
    pub lateral: String,
    /// `(H, W)` of the lateral / concat.
    pub resolution: (usize, usize),
    pub topdown_in: usize,
    pub lateral_in: usize,
    pub t: usize,
    pub l: usize,
    pub concat_in: usize,
    pub upsample_to: Option<(usize, usize)>,
    pub t_out: usize,
    pub use_1x1: bool,
    pub tout_in: usize,
}

/// Walk the full configured hierarchy at the config's input size, checking
/// channel arithmetic (`concat_in = t_j + l_i`) and spatial alignment, and
/// that upsample flags sit exactly where consecutive laterals change resolution.
pub fn wiring_walk(arch: &ArchConfig) -> Result<Vec<WiringRow>> {
    let shapes = infer_shapes(&arch.backbone, arch.input.height, arch.input.width)?;
    let shape_of = |id: &str| -> &BlockShape { shapes.iter().find(|s| s.id == id).expect("validated") };
    let top = shapes.last().expect("validated");
    let (mut td_res, mut td_ch) = ((top.height, top.width), top.channels);
    let pairs = &arch.tdm.pairs;
    let mut rows = Vec::new();
    for (k, p) in pairs.iter().enumerate() {
        let src = shape_of(&p.to);
        let res = (src.height, src.width);
        if res != td_res {
            return Err(TdmError::Alignment {
                op: "wiring_walk",
                a: td_res,
                b: res,
            });
        }
        let concat_in = td_ch + p.l;
        let next_res = pairs.get(k + 1).map(|n| {
            let s = shape_of(&n.to);
            (s.height, s.width)
        });
        let changes = next_res.is_some_and(|r| r != res);
        if p.upsample != changes {
            return Err(TdmError::Config(format!(
                "T.{}.{}: upsample flag {} but next lateral resolution {:?} vs {:?}",
                p.from, p.to, p.upsample, next_res, res
            )));
        }
        let upsample_to = if p.upsample { next_res } else { None };
        if let Some((h, w)) = upsample_to {
            if !crate::ops::upsample_target_ok(res.0, h) || !crate::ops::upsample_target_ok(res.1, w) {
                return Err(TdmError::Config(format!(
                    "T.{}.{}: cannot upsample {:?} to {:?}",
                    p.from, p.to, res, (h, w)
                )));
            }
        }
        rows.push(WiringRow {
            top_down: format!("T.{}.{}", p.from, p.to),
            lateral: format!("L.{}", p.to),
            resolution: res,
            topdown_in: td_ch,
            lateral_in: src.channels,
            t: p.t,
            l: p.l,
            concat_in,
            upsample_to,
            t_out: p.t_out,
            use_1x1: p.use_1x1,
            tout_in: p.t + p.l,
        });
        td_ch = p.t;
        td_res = upsample_to.unwrap_or(res);
    }
    Ok(rows)
}

/// Closed-form count of the TDM modules active at `stage` (excluding the backbone).
pub fn count_tdm_params(arch: &ArchConfig, stage: &Stage) -> ParamCount {
    let mut pc = ParamCount::default();
    let bb = &arch.backbone;
    let mut td = bb.top().channels;
    let pairs = stage.active_pairs(arch);
    for (k, p) in pairs.iter().enumerate() {
        let k_i = bb.blocks[bb.block_index(&p.to).expect("validated")].channels;
        pc.push(lateral_name(&p.to), conv_param_count(3, k_i, p.l));
        pc.push(topdown_name(&p.from, &p.to), conv_param_count(3, td + p.l, p.t));
        if k + 1 == pairs.len() && p.use_1x1 {
            pc.push(tout_name(&p.to), conv_param_count(1, p.t + p.l, p.t_out));
        }
        td = p.t;
    }
    pc
}
