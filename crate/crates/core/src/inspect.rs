//! Architecture tables (block shapes, pair channels, parameter counts) and
//! feature-map visual dumps.

use std::fmt::Write as _;

use serde::Serialize;

use crate::backbone::{count_backbone_params, infer_shapes, BlockShape};
use crate::config::ArchConfig;
use crate::error::Result;
use crate::synthdata::Image;
use crate::tdm::{count_tdm_params, wiring_walk, Stage, WiringRow};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InspectReport {
    pub name: String,
    pub input: (usize, usize),
    pub blocks: Vec<BlockShape>,
    pub pairs: Vec<WiringRow>,
    pub backbone_params: usize,
    /// TDM module parameters with `k` pairs active, `k = 1..=pairs`.
    pub tdm_params: Vec<usize>,
    pub warnings: Vec<String>,
}

pub fn inspect(arch: &ArchConfig) -> Result<InspectReport> {
    arch.validate()?;
    let blocks = infer_shapes(&arch.backbone, arch.input.height, arch.input.width)?;
    let pairs = wiring_walk(arch)?;
    let tdm_params = (1..=arch.tdm.pairs.len())
        .map(|k| Stage::at(arch, k).map(|s| count_tdm_params(arch, &s).total))
        .collect::<Result<Vec<_>>>()?;
    Ok(InspectReport {
        name: arch.name.clone(),
        input: (arch.input.height, arch.input.width),
        blocks,
        pairs,
        backbone_params: count_backbone_params(&arch.backbone).total,
        tdm_params,
        warnings: arch.warnings(),
    })
}

fn dim(h: usize, w: usize, c: usize) -> String {
    format!("({},{},{})", h, w, c)
}

impl InspectReport {
    /// Plain-text table; stable across runs so it can be diffed.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "arch {}  input {}x{}", self.name, self.input.0, self.input.1);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<6} {:>5} {:>6}  {}", "block", "convs", "stride", "dim");
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "{:<6} {:>5} {:>6}  {}",
                b.id,
                b.num_convs,
                b.stride,
                dim(b.height, b.width, b.channels)
            );
        }
        if !self.pairs.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(
                s,
                "{:<12} {:<8} {:>6} {:>6} {:>6} {:>8} {:>5}  {}",
                "T", "L", "t", "l", "t_out", "concat", "1x1", "upsample"
            );
            for p in &self.pairs {
                let up = match p.upsample_to {
                    Some((h, w)) => format!("{}x{} -> {}x{}", p.resolution.0, p.resolution.1, h, w),
                    None => "-".to_string(),
                };
                let _ = writeln!(
                    s,
                    "{:<12} {:<8} {:>6} {:>6} {:>6} {:>8} {:>5}  {}",
                    p.top_down,
                    p.lateral,
                    p.t,
                    p.l,
                    p.t_out,
                    p.concat_in,
                    if p.use_1x1 { "yes" } else { "no" },
                    up
                );
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "params backbone {}", self.backbone_params);
        for (k, n) in self.tdm_params.iter().enumerate() {
            let _ = writeln!(s, "params tdm stage {} {}", k + 1, n);
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning {}", w);
        }
        s
    }
}

/// Grid of up to `max_channels` channels of an `[H, W, C]` map, each
/// min-max scaled to grey levels, one pixel gap between tiles.
pub fn feature_mosaic(t: &Tensor, max_channels: usize) -> Result<Image> {
    let (h, w, c) = t.hwc()?;
    let n = c.min(max_channels.max(1));
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (mw, mh) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let mut data = vec![0u8; mw * mh * 3];
    for ch in 0..n {
        let vals: Vec<f64> = (0..h * w).map(|i| t.data()[i * c + ch] as f64).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (oy, ox) = ((ch / cols) * (h + 1), (ch % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                let v = ((vals[y * w + x] - lo) / span * 255.0).round() as u8;
                let o = ((oy + y) * mw + ox + x) * 3;
                data[o..o + 3].copy_from_slice(&[v, v, v]);
            }
        }
    }
    Ok(Image {
        width: mw,
        height: mh,
        data,
    })
}
