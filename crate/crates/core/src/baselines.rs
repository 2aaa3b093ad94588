//! Ablation comparators: skip-pooling (multi-block ROI features, no top-down
//! path) and the no-lateral variant (top-down convolutions only, widened to
//! match parameter count).

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{conv_param_count, count_store_params, init_backbone_params, FeatureMap, ParamCount};
use crate::config::ArchConfig;
use crate::detect::BBox;
use crate::error::{Result, TdmError};
use crate::ops::ConvGeometry;
use crate::params::{add_conv, ParamStore};
use crate::tdm::{count_tdm_params, find_feature, Stage};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipPoolSpec {
    pub source_blocks: Vec<String>,
    pub ref_block: String,
    pub proj_channels: usize,
}

impl SkipPoolSpec {
    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        if self.source_blocks.is_empty() || self.proj_channels == 0 {
            return Err(TdmError::Config(
                "skip-pool needs sources and a positive projection width".into(),
            ));
        }
        if !self.source_blocks.contains(&self.ref_block) {
            return Err(TdmError::Config(format!(
                "skip-pool reference block {} is not a source",
                self.ref_block
            )));
        }
        let taps = arch.backbone.tap_indices();
        for s in &self.source_blocks {
            match arch.backbone.block_index(s) {
                Some(i) if taps.contains(&i) => {}
                _ => return Err(TdmError::Config(format!("skip-pool source {} is not tapped", s))),
            }
        }
        Ok(())
    }

    /// Channels of the concatenated, normalised ROI feature before projection.
    pub fn concat_channels(&self, arch: &ArchConfig) -> usize {
        self.source_blocks
            .iter()
            .filter_map(|s| arch.backbone.block_index(s))
            .map(|i| arch.backbone.blocks[i].channels)
            .sum()
    }
}

pub const SKIP_SCALE: &str = "skip.scale";
pub const SKIP_PROJ: &str = "skip.proj";

pub fn init_skip_pool(store: &mut ParamStore, arch: &ArchConfig, spec: &SkipPoolSpec, seed: u64) -> Result<()> {
    spec.validate(arch)?;
    store.insert(SKIP_SCALE, Tensor::scalar(1.0))?;
    add_conv(store, SKIP_PROJ, 1, spec.concat_channels(arch), spec.proj_channels, 1.0, seed)
}

/// Intermediate tensors of [`skip_pool_forward`], kept for audits.
pub struct SkipPoolOutput {
    /// `[R, s * s * proj_channels]`.
    pub features: Var,
    /// Concatenated normalised features before rescaling, `[R, s, s, sum C]`.
    pub concat: Var,
    /// Rescaled features before projection.
    pub scaled: Var,
}

/// ROI-pool each source, L2-normalise per position, concatenate, multiply by
/// the learnable scale and project with a 1x1 conv.
pub fn skip_pool_forward(
    g: &mut Graph,
    params: &ParamStore,
    spec: &SkipPoolSpec,
    feats: &[FeatureMap],
    rois: &[BBox],
    roi_size: usize,
) -> Result<SkipPoolOutput> {
    let boxes: Vec<[f64; 4]> = rois.iter().map(|b| b.as_array()).collect();
    let mut concat: Option<Var> = None;
    for s in &spec.source_blocks {
        let f = find_feature(feats, s)?;
        let pooled = g.roi_pool(f.var, &boxes, f.stride as f64, roi_size, roi_size)?;
        let (normed, _) = g.l2_normalize(pooled)?;
        concat = Some(match concat {
            None => normed,
            Some(c) => g.concat(c, normed)?,
        });
    }
    let concat = concat.ok_or_else(|| TdmError::Config("skip-pool has no sources".into()))?;
    let scale = g.param(params, SKIP_SCALE)?;
    let scaled = g.scale(concat, scale)?;
    let r = rois.len();
    let c = g.value(scaled).last_dim();
    let as_map = g.reshape(scaled, &[r * roi_size, roi_size, c])?;
    let w = g.param(params, &format!("{}.w", SKIP_PROJ))?;
    let b = g.param(params, &format!("{}.b", SKIP_PROJ))?;
    let proj = g.conv2d(as_map, w, b, ConvGeometry::new(1, 0, 1))?;
    let p = g.value(proj).last_dim();
    let features = g.reshape(proj, &[r, roi_size * roi_size * p])?;
    Ok(SkipPoolOutput {
        features,
        concat,
        scaled,
    })
}

/// Mean per-position L2 norm over the channel axis.
pub fn mean_position_norm(t: &Tensor) -> f64 {
    let c = t.last_dim().max(1);
    let rows = t.len() / c;
    if rows == 0 {
        return 0.0;
    }
    let total: f64 = t
        .data()
        .chunks_exact(c)
        .map(|r| r.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt())
        .sum();
    total / rows as f64
}

/// Set the scale so that the rescaled concatenation has the reference
/// block's mean ROI-feature norm over `batch` (image, ROIs) pairs.
/// Returns `(reference norm, concatenated norm before rescaling)`.
pub fn calibrate_skip_scale<F>(
    params: &mut ParamStore,
    spec: &SkipPoolSpec,
    roi_size: usize,
    batch: &[(Tensor, Vec<BBox>)],
    mut features: F,
) -> Result<(f64, f64)>
where
    F: FnMut(&mut Graph, Var) -> Result<Vec<FeatureMap>>,
{
    let (mut ref_sum, mut cat_sum, mut n) = (0.0, 0.0, 0usize);
    for (image, rois) in batch {
        if rois.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let feats = features(&mut g, x)?;
        let boxes: Vec<[f64; 4]> = rois.iter().map(|b| b.as_array()).collect();
        let f = find_feature(&feats, &spec.ref_block)?;
        let pooled = g.roi_pool(f.var, &boxes, f.stride as f64, roi_size, roi_size)?;
        let out = skip_pool_forward(&mut g, params, spec, &feats, rois, roi_size)?;
        ref_sum += mean_position_norm(g.value(pooled)) * rois.len() as f64;
        cat_sum += mean_position_norm(g.value(out.concat)) * rois.len() as f64;
        n += rois.len();
    }
    if n == 0 || cat_sum <= 0.0 {
        return Err(TdmError::Invalid("skip-pool calibration batch has no usable ROIs".into()));
    }
    let (ref_mean, cat_mean) = (ref_sum / n as f64, cat_sum / n as f64);
    params.set(SKIP_SCALE, Tensor::scalar((ref_mean / cat_mean) as Real));
    Ok((ref_mean, cat_mean))
}

/// How wide each no-lateral top-down module is.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum WidenPolicy {
    /// Choose the width of each new module so the cumulative module count
    /// matches the TDM stage.
    Parity,
    /// Width `round(m * t)`; `Fixed(1.0)` is no widening.
    Fixed(f64),
}

pub const PARITY_TOLERANCE: f64 = 0.01;

pub fn nolat_topdown_name(from: &str, to: &str) -> String {
    format!("nolat.T.{}.{}", from, to)
}

pub fn nolat_out_name(to: &str) -> String {
    format!("nolat.out.{}", to)
}

/// Module parameter count of the no-lateral variant with `widths[p]` for the
/// first `widths.len()` pairs.
pub fn count_no_lateral(arch: &ArchConfig, widths: &[usize]) -> ParamCount {
    let mut pc = ParamCount::default();
    let mut td = arch.backbone.top().channels;
    for (k, (p, &w)) in arch.tdm.pairs.iter().zip(widths).enumerate() {
        pc.push(nolat_topdown_name(&p.from, &p.to), conv_param_count(3, td, w));
        if k + 1 == widths.len() && w != p.t_out {
            pc.push(nolat_out_name(&p.to), conv_param_count(1, w, p.t_out));
        }
        td = w;
    }
    pc
}

fn rel_delta(a: usize, b: usize) -> f64 {
    (a as f64 - b as f64).abs() / (b as f64).max(1.0)
}

/// Width of the next no-lateral module given the earlier ones.
pub fn choose_width(arch: &ArchConfig, prev: &[usize], policy: WidenPolicy) -> Result<usize> {
    let k = prev.len();
    let pair = arch.tdm.pairs.get(k).ok_or_else(|| {
        TdmError::Invalid(format!("{} has no pair {}", arch.name, k))
    })?;
    match policy {
        WidenPolicy::Fixed(m) => Ok(((m * pair.t as f64).round() as usize).max(1)),
        WidenPolicy::Parity => {
            let target = count_tdm_params(arch, &Stage::at(arch, k + 1)?).total;
            let count = |w: usize| {
                let mut ws = prev.to_vec();
                ws.push(w);
                count_no_lateral(arch, &ws).total
            };
            // Smallest width reaching the target, by bisection on a monotone count.
            let (mut lo, mut hi) = (1usize, 1usize);
            while count(hi) < target {
                hi *= 2;
                if hi > 1 << 24 {
                    return Err(TdmError::Invalid("no-lateral width search diverged".into()));
                }
            }
            while lo < hi {
                let mid = (lo + hi) / 2;
                if count(mid) < target {
                    lo = mid + 1;
                } else {
                    hi = mid;
                }
            }
            let w = if lo > 1 && rel_delta(count(lo - 1), target) <= rel_delta(count(lo), target) {
                lo - 1
            } else {
                lo
            };
            let delta = rel_delta(count(w), target);
            if delta > PARITY_TOLERANCE {
                return Err(TdmError::Invalid(format!(
                    "no-lateral stage {} cannot reach parity: best width {} is off by {:.3}%",
                    k + 1,
                    w,
                    100.0 * delta
                )));
            }
            Ok(w)
        }
    }
}

/// Parity-matched widths for every configured pair.
pub fn parity_widths(arch: &ArchConfig) -> Result<Vec<usize>> {
    let mut widths = Vec::new();
    for _ in 0..arch.tdm.pairs.len() {
        let w = choose_width(arch, &widths, WidenPolicy::Parity)?;
        widths.push(w);
    }
    Ok(widths)
}

#[derive(Clone, Debug)]
pub struct NoLateralNet {
    pub arch: ArchConfig,
    pub widths: Vec<usize>,
    pub params: ParamStore,
}

/// Stage-`k` no-lateral network grown from `prev` (stage `k - 1`), mirroring
/// [`crate::tdm::build_stage`].
pub fn build_no_lateral(
    arch: &ArchConfig,
    k: usize,
    prev: Option<&NoLateralNet>,
    policy: WidenPolicy,
    seed: u64,
) -> Result<NoLateralNet> {
    if k == 0 || k > arch.tdm.pairs.len() {
        return Err(TdmError::Invalid(format!(
            "no-lateral stage must lie in 1..={}",
            arch.tdm.pairs.len()
        )));
    }
    let mut params = ParamStore::new();
    let mut widths = match prev {
        Some(p) if p.widths.len() == k - 1 => {
            params.copy_prefix_from(&p.params, "backbone.");
            params.copy_prefix_from(&p.params, "nolat.");
            params.remove_prefix("nolat.out.");
            p.widths.clone()
        }
        Some(p) => {
            return Err(TdmError::Invalid(format!(
                "no-lateral stage {} must grow from stage {}, got {}",
                k,
                k - 1,
                p.widths.len()
            )))
        }
        None if k == 1 => {
            init_backbone_params(&arch.backbone, &mut params, seed)?;
            vec![]
        }
        None => {
            return Err(TdmError::Invalid(format!(
                "no-lateral stage {} needs the stage {} parameters",
                k,
                k - 1
            )))
        }
    };
    let w = choose_width(arch, &widths, policy)?;
    let p = &arch.tdm.pairs[k - 1];
    let td = widths.last().copied().unwrap_or(arch.backbone.top().channels);
    add_conv(&mut params, &nolat_topdown_name(&p.from, &p.to), 3, td, w, 1.0, seed)?;
    if w != p.t_out {
        add_conv(&mut params, &nolat_out_name(&p.to), 1, w, p.t_out, 1.0, seed)?;
    }
    widths.push(w);
    Ok(NoLateralNet {
        arch: arch.clone(),
        widths,
        params,
    })
}

impl NoLateralNet {
    pub fn count_params(&self) -> ParamCount {
        count_store_params(&self.params)
    }
}

/// `~T` chain: `x^T_i = up(relu(conv3x3(x^T_j)))`, then a 1x1 conv + ReLU to
/// `t_out` at the lowest active level.
pub fn no_lateral_from_features(
    arch: &ArchConfig,
    widths: &[usize],
    params: &ParamStore,
    g: &mut Graph,
    feats: &[FeatureMap],
) -> Result<FeatureMap> {
    let top = feats.last().expect("top block is always tapped").clone();
    let mut x = top.var;
    let k = widths.len();
    for (i, p) in arch.tdm.pairs[..k].iter().enumerate() {
        let name = nolat_topdown_name(&p.from, &p.to);
        let w = g.param(params, &format!("{}.w", name))?;
        let b = g.param(params, &format!("{}.b", name))?;
        let y = g.conv2d(x, w, b, ConvGeometry::new(1, 1, 1))?;
        x = g.relu(y)?;
        let level = find_feature(feats, &p.to)?;
        if i + 1 < k {
            if p.upsample {
                let next = find_feature(feats, &arch.tdm.pairs[i + 1].to)?;
                let (h, wd, _) = g.value(next.var).hwc()?;
                x = g.upsample(x, h, wd)?;
            }
            continue;
        }
        if widths[i] != p.t_out {
            let name = nolat_out_name(&p.to);
            let w = g.param(params, &format!("{}.w", name))?;
            let b = g.param(params, &format!("{}.b", name))?;
            let y = g.conv2d(x, w, b, ConvGeometry::new(1, 0, 1))?;
            x = g.relu(y)?;
        }
        let (h, wd, _) = g.value(x).hwc()?;
        let (lh, lw, _) = g.value(level.var).hwc()?;
        if (h, wd) != (lh, lw) {
            return Err(TdmError::Alignment {
                op: "no_lateral",
                a: (h, wd),
                b: (lh, lw),
            });
        }
        return Ok(FeatureMap {
            var: x,
            stride: level.stride,
            source: p.to.clone(),
        });
    }
    Ok(top)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ArchConfig {
        ArchConfig::from_json(include_str!("../../../configs/toy4.json")).unwrap()
    }

    #[test]
    fn toy_parity_widths() {
        let arch = toy();
        let widths = parity_widths(&arch).unwrap();
        for k in 1..=widths.len() {
            let tdm = count_tdm_params(&arch, &Stage::at(&arch, k).unwrap()).total;
            let nl = count_no_lateral(&arch, &widths[..k]).total;
            assert!(rel_delta(nl, tdm) <= PARITY_TOLERANCE, "stage {}: {} vs {}", k, nl, tdm);
        }
    }

    #[test]
    fn no_widening_is_smaller() {
        let arch = toy();
        let mut prev: Option<NoLateralNet> = None;
        for k in 1..=3 {
            let net = build_no_lateral(&arch, k, prev.as_ref(), WidenPolicy::Fixed(1.0), 0).unwrap();
            let tdm = count_tdm_params(&arch, &Stage::at(&arch, k).unwrap()).total;
            assert!(count_no_lateral(&arch, &net.widths).total < tdm);
            assert!(net.params.names().all(|n| !n.contains(".L.")));
            prev = Some(net);
        }
    }

    #[test]
    fn skip_spec_checks_reference() {
        let spec = SkipPoolSpec {
            source_blocks: vec!["C2".into(), "C3".into()],
            ref_block: "C4".into(),
            proj_channels: 32,
        };
        assert!(spec.validate(&toy()).is_err());
    }
}
