//! Bottom-up block stacks `C_1 .. C_n`.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::config::{BackboneConfig, BlockSpec};
use crate::error::{Result, TdmError};
use crate::ops::ConvGeometry;
use crate::params::{add_conv, ParamStore};

/// A feature map on the tape plus its stride relative to the input image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub var: Var,
    pub stride: usize,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockShape {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: usize,
    pub num_convs: usize,
}

fn conv_geometries(b: &BlockSpec) -> impl Iterator<Item = ConvGeometry> + '_ {
    (0..b.num_convs).map(move |j| {
        if j == 0 {
            ConvGeometry::new(b.stride, b.first_conv_pad(), b.dilation)
        } else {
            ConvGeometry::new(1, b.conv_pad(), b.dilation)
        }
    })
}

/// Output shape of every block, by arithmetic alone.
pub fn infer_shapes(cfg: &BackboneConfig, input_h: usize, input_w: usize) -> Result<Vec<BlockShape>> {
    cfg.validate()?;
    let (mut h, mut w, mut stride) = (input_h, input_w, 1usize);
    if h == 0 || w == 0 {
        return Err(TdmError::OutputSize {
            op: "infer_shapes",
            detail: format!("{}x{} input", input_h, input_w),
        });
    }
    let mut out = Vec::with_capacity(cfg.blocks.len());
    for b in &cfg.blocks {
        for geom in conv_geometries(b) {
            match (geom.out_dim(h, b.kernel), geom.out_dim(w, b.kernel)) {
                (Some(nh), Some(nw)) => {
                    h = nh;
                    w = nw;
                }
                _ => {
                    return Err(TdmError::OutputSize {
                        op: "backbone",
                        detail: format!("block {} cannot convolve a {}x{} input", b.id, h, w),
                    })
                }
            }
        }
        stride *= b.stride;
        if b.pool_after {
            let (nh, nw) = (b.pool_rounding[0].out_dim(h), b.pool_rounding[1].out_dim(w));
            if h < 2 || w < 2 || nh == 0 || nw == 0 {
                return Err(TdmError::OutputSize {
                    op: "backbone",
                    detail: format!("block {} cannot pool a {}x{} input", b.id, h, w),
                });
            }
            h = nh;
            w = nw;
            stride *= 2;
        }
        out.push(BlockShape {
            id: b.id.clone(),
            height: h,
            width: w,
            channels: b.channels,
            stride,
            num_convs: b.num_convs,
        });
    }
    Ok(out)
}

pub fn conv_param_count(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout + cout
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub per_module: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCount {
    pub fn push(&mut self, module: impl Into<String>, n: usize) {
        self.per_module.push((module.into(), n));
        self.total += n;
    }

    pub fn extend(&mut self, other: ParamCount) {
        for (m, n) in other.per_module {
            self.push(m, n);
        }
    }
}

/// Closed-form count `sum(Kh*Kw*Cin*Cout + Cout)` per block.
pub fn count_backbone_params(cfg: &BackboneConfig) -> ParamCount {
    let mut pc = ParamCount::default();
    let mut cin = cfg.input_channels;
    for b in &cfg.blocks {
        let first = conv_param_count(b.kernel, cin, b.channels);
        let rest = (b.num_convs - 1) * conv_param_count(b.kernel, b.channels, b.channels);
        pc.push(format!("backbone.{}", b.id), first + rest);
        cin = b.channels;
    }
    pc
}

/// Count the values actually held in `store`, grouped by module path
/// (the parameter name minus its trailing `.w` / `.b`).
pub fn count_store_params(store: &ParamStore) -> ParamCount {
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for p in store.iter() {
        let module = match p.name.rsplit_once('.') {
            Some((m, _)) => m.to_string(),
            None => p.name.clone(),
        };
        *groups.entry(module).or_default() += p.numel();
    }
    let mut pc = ParamCount::default();
    for (m, n) in groups {
        pc.push(m, n);
    }
    pc
}

fn conv_name(block: &str, j: usize) -> String {
    format!("backbone.{}.conv{}", block, j)
}

pub fn init_backbone_params(cfg: &BackboneConfig, store: &mut ParamStore, seed: u64) -> Result<()> {
    cfg.validate()?;
    let mut cin = cfg.input_channels;
    for b in &cfg.blocks {
        for j in 0..b.num_convs {
            add_conv(store, &conv_name(&b.id, j), b.kernel, cin, b.channels, 1.0, seed)?;
            cin = b.channels;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct BackboneNet {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<BackboneNet> {
    let mut params = ParamStore::new();
    init_backbone_params(config, &mut params, seed)?;
    Ok(BackboneNet {
        config: config.clone(),
        params,
    })
}

impl BackboneNet {
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Vec<FeatureMap>> {
        backbone_forward(&self.config, &self.params, g, image)
    }

    pub fn count_params(&self) -> ParamCount {
        count_store_params(&self.params)
    }
}

/// Run every block and return the tapped outputs `x^C_i`, bottom-up.
pub fn backbone_forward(
    cfg: &BackboneConfig,
    params: &ParamStore,
    g: &mut Graph,
    image: Var,
) -> Result<Vec<FeatureMap>> {
    let (h, w, c) = g.value(image).hwc()?;
    if c != cfg.input_channels {
        return Err(TdmError::shape(
            "backbone",
            format!("image has {} channels, config expects {}", c, cfg.input_channels),
        ));
    }
    let shapes = infer_shapes(cfg, h, w)?;
    let taps = cfg.tap_indices();
    let mut x = image;
    let mut out = Vec::with_capacity(taps.len());
    for (i, (b, shape)) in cfg.blocks.iter().zip(&shapes).enumerate() {
        for (j, geom) in conv_geometries(b).enumerate() {
            let name = conv_name(&b.id, j);
            let wv = g.param(params, &format!("{}.w", name))?;
            let bv = g.param(params, &format!("{}.b", name))?;
            let y = g.conv2d(x, wv, bv, geom)?;
            x = g.relu(y)?;
        }
        if b.pool_after {
            x = g.maxpool2x(x, b.pool_rounding)?;
        }
        g.set_label(x, b.id.clone());
        if taps.contains(&i) {
            out.push(FeatureMap {
                var: x,
                stride: shape.stride,
                source: b.id.clone(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn block(id: &str, n: usize, c: usize, pool: bool) -> BlockSpec {
        BlockSpec {
            id: id.into(),
            name: None,
            num_convs: n,
            channels: c,
            kernel: 3,
            pool_after: pool,
            stride: 1,
            dilation: 1,
            pad: None,
            first_pad: None,
            pool_rounding: Default::default(),
        }
    }

    fn toy() -> BackboneConfig {
        BackboneConfig {
            input_channels: 3,
            blocks: vec![
                block("C1", 1, 8, true),
                block("C2", 1, 16, true),
                block("C3", 1, 32, true),
                block("C4", 1, 32, true),
            ],
            taps: vec!["C1".into(), "C2".into(), "C3".into()],
        }
    }

    #[test]
    fn toy_param_count_closed_form() {
        let pc = count_backbone_params(&toy());
        let expected = (9 * 3 * 8 + 8) + (9 * 8 * 16 + 16) + (9 * 16 * 32 + 32) + (9 * 32 * 32 + 32);
        assert_eq!(pc.total, expected);
        assert_eq!(build_backbone(&toy(), 1).unwrap().count_params().total, expected);
    }

    #[test]
    fn single_conv_count() {
        assert_eq!(conv_param_count(3, 64, 16), 9232);
        assert_eq!(ParamCount::default().total, 0);
    }

    #[test]
    fn zero_blocks_rejected() {
        let cfg = BackboneConfig {
            input_channels: 3,
            blocks: vec![],
            taps: vec![],
        };
        assert!(build_backbone(&cfg, 0).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let a = build_backbone(&toy(), 3).unwrap();
        let b = build_backbone(&toy(), 3).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn same_padding_preserves_shape() {
        let mut cfg = toy();
        for b in cfg.blocks.iter_mut() {
            b.pool_after = false;
        }
        for s in infer_shapes(&cfg, 9, 13).unwrap() {
            assert_eq!((s.height, s.width, s.stride), (9, 13, 1));
        }
    }

    #[test]
    fn tiny_image_fails() {
        let net = build_backbone(&toy(), 0).unwrap();
        let mut g = Graph::new();
        let img = g.input(Tensor::zeros(&[1, 1, 3]));
        assert!(matches!(
            net.forward(&mut g, img),
            Err(TdmError::OutputSize { .. })
        ));
    }

    #[test]
    fn forward_matches_inferred_shapes() {
        let net = build_backbone(&toy(), 0).unwrap();
        let mut g = Graph::new();
        let img = g.input(Tensor::full(&[20, 23, 3], 0.5));
        let feats = net.forward(&mut g, img).unwrap();
        let shapes = infer_shapes(&net.config, 20, 23).unwrap();
        assert_eq!(feats.len(), 4);
        for (f, s) in feats.iter().zip(&shapes) {
            assert_eq!(g.value(f.var).shape(), &[s.height, s.width, s.channels]);
            assert_eq!(f.stride, s.stride);
        }
    }
}
