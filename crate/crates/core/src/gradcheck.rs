//! Central finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::backbone::FeatureMap;
use crate::detect::{gen_anchors, init_heads, match_and_sample, rpn_forward, rpn_loss, BBox, DetectorConfig};
use crate::error::{Result, TdmError};
use crate::ops::{ConvGeometry, PoolRounding};
use crate::params::{add_conv, ParamStore};
use crate::tdm::{
    lateral_forward, lateral_name, topdown_forward, topdown_name, tout_forward, tout_name, LateralSpec, TopDownSpec,
    ToutSpec,
};
use crate::tensor::{Real, Tensor, IS_F64};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: Real,
    pub tol: Real,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are numerically zero are compared absolutely.
    pub floor: Real,
    /// Skip coordinates whose one-sided differences disagree (a kink between
    /// `x - eps` and `x + eps`).
    pub exclude_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            exclude_kinks: true,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub passed: bool,
}

/// Compare analytic gradients of the scalar built by `f` with central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)`, for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_filtered(f, inputs, opts, |_, _, _| true)
}

/// As [`grad_check`], but only coordinates accepted by `keep(input, index, value)` are compared.
pub fn grad_check_filtered<F, K>(
    f: F,
    inputs: &[Tensor],
    opts: GradCheckOptions,
    keep: K,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    K: Fn(usize, usize, Real) -> bool,
{
    if !IS_F64 {
        return Err(TdmError::Invalid(
            "gradient checks require the 64-bit build".into(),
        ));
    }
    let eval = |xs: &[Tensor]| -> Result<Real> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let f0 = g.scalar(out);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel: Real = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let x0 = input.data()[i];
            if !keep(k, i, x0) {
                continue;
            }
            work[k].data_mut()[i] = x0 + opts.eps;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - opts.eps;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;

            let numeric = (fp - fm) / (2.0 * opts.eps);
            if opts.exclude_kinks {
                let fwd = fp - f0;
                let bwd = f0 - fm;
                if (fwd - bwd).abs() > 1e-2 * opts.eps * numeric.abs().max(1.0) {
                    skipped += 1;
                    continue;
                }
            }
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel as f64,
        checked,
        skipped_kinks: skipped,
        passed: max_rel <= opts.tol && checked > 0,
    })
}

/// As [`grad_check`] over the values of a parameter store: the loss is
/// rebuilt from the store, so module code is checked as written. Only
/// parameters accepted by `keep` are perturbed.
pub fn grad_check_store<F, K>(store: &ParamStore, f: F, opts: GradCheckOptions, keep: K) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    K: Fn(&str) -> bool,
{
    if !IS_F64 {
        return Err(TdmError::Invalid(
            "gradient checks require the 64-bit build".into(),
        ));
    }
    let mut work = store.clone();
    work.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    let f0 = g.scalar(out);
    g.backward(out)?;
    g.accumulate_param_grads(&mut work)?;
    let analytic: Vec<(String, Tensor)> = work
        .iter()
        .filter(|p| keep(&p.name))
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();
    let eval = |s: &ParamStore| -> Result<Real> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.scalar(out))
    };
    let mut max_rel: Real = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let x0 = work.get(name)?.value.data()[i];
            work.get_mut(name)?.value.data_mut()[i] = x0 + opts.eps;
            let fp = eval(&work)?;
            work.get_mut(name)?.value.data_mut()[i] = x0 - opts.eps;
            let fm = eval(&work)?;
            work.get_mut(name)?.value.data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            if opts.exclude_kinks && ((fp - f0) - (f0 - fm)).abs() > 1e-2 * opts.eps * numeric.abs().max(1.0) {
                skipped += 1;
                continue;
            }
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel as f64,
        checked,
        skipped_kinks: skipped,
        passed: max_rel <= opts.tol && checked > 0,
    })
}

/// One (operation, seed) entry of the gradient suite.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteCase {
    pub op: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn rand_tensor(shape: &[usize], seed: u64, salt: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(salt));
    Tensor::uniform(shape, 1.0, &mut rng)
}

type CaseFn = fn(u64) -> Result<GradCheckReport>;

fn projected<F>(f: F, inputs: Vec<Tensor>, out_shape: &[usize], seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let r = rand_tensor(out_shape, seed, 999);
    grad_check(
        |g, v| {
            let y = f(g, v)?;
            g.dot(y, r.clone())
        },
        &inputs,
        GradCheckOptions::default(),
    )
}

fn conv_case(seed: u64, geom: ConvGeometry, h: usize) -> Result<GradCheckReport> {
    let k = 3;
    let out = geom.out_dim(h, k).expect("valid geometry");
    projected(
        move |g, v| g.conv2d(v[0], v[1], v[2], geom),
        vec![rand_tensor(&[h, h, 2], seed, 1), rand_tensor(&[k, k, 2, 3], seed, 2), rand_tensor(&[3], seed, 3)],
        &[out, out, 3],
        seed,
    )
}

fn case_conv(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, ConvGeometry::new(1, 1, 1), 5)
}
fn case_conv_strided(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, ConvGeometry::new(2, 0, 1), 7)
}
fn case_conv_dilated(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, ConvGeometry::new(1, 2, 2), 6)
}
fn case_relu(seed: u64) -> Result<GradCheckReport> {
    projected(|g, v| g.relu(v[0]), vec![rand_tensor(&[4, 4, 3], seed, 1)], &[4, 4, 3], seed)
}
fn case_maxpool_ceil(seed: u64) -> Result<GradCheckReport> {
    projected(
        |g, v| g.maxpool2x(v[0], [PoolRounding::Ceil; 2]),
        vec![rand_tensor(&[5, 7, 2], seed, 1)],
        &[3, 4, 2],
        seed,
    )
}
fn case_maxpool_floor(seed: u64) -> Result<GradCheckReport> {
    projected(
        |g, v| g.maxpool2x(v[0], [PoolRounding::Floor, PoolRounding::Ceil]),
        vec![rand_tensor(&[5, 7, 2], seed, 1)],
        &[2, 4, 2],
        seed,
    )
}
fn case_upsample(seed: u64) -> Result<GradCheckReport> {
    projected(|g, v| g.upsample(v[0], 7, 6), vec![rand_tensor(&[3, 3, 2], seed, 1)], &[7, 6, 2], seed)
}
fn case_concat(seed: u64) -> Result<GradCheckReport> {
    projected(
        |g, v| g.concat(v[0], v[1]),
        vec![rand_tensor(&[3, 3, 2], seed, 1), rand_tensor(&[3, 3, 3], seed, 2)],
        &[3, 3, 5],
        seed,
    )
}
fn case_linear(seed: u64) -> Result<GradCheckReport> {
    projected(
        |g, v| g.linear(v[0], v[1], v[2]),
        vec![rand_tensor(&[3, 5], seed, 1), rand_tensor(&[4, 5], seed, 2), rand_tensor(&[4], seed, 3)],
        &[3, 4],
        seed,
    )
}
fn case_softmax_ce(seed: u64) -> Result<GradCheckReport> {
    let labels = vec![(seed % 4) as usize, 2, 0];
    grad_check(
        move |g, v| g.softmax_ce(v[0], labels.clone()),
        &[rand_tensor(&[3, 4], seed, 1)],
        GradCheckOptions::default(),
    )
}
fn case_smooth_l1(seed: u64) -> Result<GradCheckReport> {
    let target = rand_tensor(&[4, 4], seed, 2);
    let weights = Tensor::from_fn(&[4, 4], |i| if i % 3 == 0 { 0.0 } else { 1.0 });
    let x = Tensor::from_fn(&[4, 4], |i| rand_tensor(&[16], seed, 1).data()[i] * 2.0);
    grad_check(
        move |g, v| g.smooth_l1(v[0], target.clone(), Some(weights.clone()), 3.0),
        &[x],
        GradCheckOptions::default(),
    )
}
fn case_l2_normalize(seed: u64) -> Result<GradCheckReport> {
    projected(|g, v| Ok(g.l2_normalize(v[0])?.0), vec![rand_tensor(&[2, 3, 4], seed, 1)], &[2, 3, 4], seed)
}
fn case_roi_pool(seed: u64) -> Result<GradCheckReport> {
    let rois = [[0.0, 0.0, 12.0, 10.0], [3.0, 2.0, 9.0, 12.0]];
    projected(
        move |g, v| g.roi_pool(v[0], &rois, 2.0, 2, 2),
        vec![rand_tensor(&[6, 6, 3], seed, 1)],
        &[2, 2, 2, 3],
        seed,
    )
}
fn case_gather(seed: u64) -> Result<GradCheckReport> {
    projected(
        |g, v| g.gather(v[0], vec![3, 0, 3, 7, 5, 1], &[3, 2]),
        vec![rand_tensor(&[8], seed, 1)],
        &[3, 2],
        seed,
    )
}
fn case_reshape(seed: u64) -> Result<GradCheckReport> {
    projected(|g, v| g.reshape(v[0], &[6, 2]), vec![rand_tensor(&[2, 3, 2], seed, 1)], &[6, 2], seed)
}
fn case_scale(seed: u64) -> Result<GradCheckReport> {
    projected(
        |g, v| g.scale(v[0], v[1]),
        vec![rand_tensor(&[3, 4], seed, 1), rand_tensor(&[1], seed, 2)],
        &[3, 4],
        seed,
    )
}
fn case_weighted_sum(seed: u64) -> Result<GradCheckReport> {
    grad_check(
        |g, v| g.weighted_sum(&[(v[0], 1.0), (v[1], -0.5), (v[2], 2.0)]),
        &[rand_tensor(&[1], seed, 1), rand_tensor(&[1], seed, 2), rand_tensor(&[1], seed, 3)],
        GradCheckOptions::default(),
    )
}

/// Two-pair top-down hierarchy (with an upsample) into a strided RPN:
/// objectness cross-entropy plus box smooth-L1 over a fixed anchor sample.
fn case_composed(seed: u64) -> Result<GradCheckReport> {
    let cfg: DetectorConfig = serde_json::from_value(serde_json::json!({
        "num_classes": 1,
        "rpn_hidden": 4,
        "anchor_scales": [4.0, 8.0],
        "anchor_ratios": [1.0],
        "reference_stride": 4,
        "rpn_batch": 12,
        "roi_size": 1,
        "fc_dims": [2]
    }))?;
    let mut store = ParamStore::new();
    store.insert("x.top", rand_tensor(&[3, 3, 4], seed, 1))?;
    store.insert("x.B", rand_tensor(&[3, 3, 3], seed, 2))?;
    store.insert("x.C", rand_tensor(&[6, 6, 3], seed, 3))?;
    add_conv(&mut store, &lateral_name("B"), 3, 3, 2, 1.0, seed)?;
    add_conv(&mut store, &topdown_name("A", "B"), 3, 6, 3, 1.0, seed)?;
    add_conv(&mut store, &lateral_name("C"), 3, 3, 2, 1.0, seed)?;
    add_conv(&mut store, &topdown_name("B", "C"), 3, 5, 3, 1.0, seed)?;
    add_conv(&mut store, &tout_name("C"), 1, 5, 4, 1.0, seed)?;
    init_heads(&mut store, &cfg, 4, 4, seed)?;
    // Non-zero biases so that every ReLU sees both signs.
    for p in store.iter_mut() {
        if p.name.ends_with(".b") {
            let t = rand_tensor(p.value.shape(), seed, p.value.len() as u64 + 17);
            p.value = Tensor::from_fn(t.shape(), |i| 0.1 * t.data()[i]);
        }
    }
    let grid = cfg.anchor_grid(2);
    let anchors = gen_anchors(&grid, 6, 6);
    let gts = [BBox::new(1.0, 1.0, 6.0, 5.0), BBox::new(5.0, 6.0, 11.0, 12.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = match_and_sample(&anchors, &gts, &cfg.anchor_sampling(), &mut rng)?;
    let f = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let xt = g.param(s, "x.top")?;
        let xb = g.param(s, "x.B")?;
        let xc = g.param(s, "x.C")?;
        let lb = lateral_forward(g, s, &LateralSpec { source_block: "B".into(), out_channels: 2 }, xb)?;
        let td = TopDownSpec { from: "A".into(), to: "B".into(), out_channels: 3, upsample: true };
        let y = topdown_forward(g, s, &td, xt, lb, Some((6, 6)))?;
        let lc = lateral_forward(g, s, &LateralSpec { source_block: "C".into(), out_channels: 2 }, xc)?;
        let td = TopDownSpec { from: "B".into(), to: "C".into(), out_channels: 3, upsample: false };
        let y = topdown_forward(g, s, &td, y, lc, None)?;
        let a = g.concat(y, lc)?;
        let out = tout_forward(g, s, &ToutSpec { out_channels: 4, use_1x1: true }, "C", a)?;
        let feat = FeatureMap { var: out, stride: 2, source: "C".into() };
        let rpn = rpn_forward(g, s, &cfg, &feat)?;
        let (cls, reg) = rpn_loss(g, &rpn, &sample)?;
        g.weighted_sum(&[(cls, 1.0), (reg, 1.0)])
    };
    grad_check_store(&store, f, GradCheckOptions::default(), |n| !n.starts_with("head.rcn"))
}

pub const SUITE_CASES: [(&str, CaseFn); 19] = [
    ("conv2d", case_conv),
    ("conv2d_strided", case_conv_strided),
    ("conv2d_dilated", case_conv_dilated),
    ("relu", case_relu),
    ("maxpool2x_ceil", case_maxpool_ceil),
    ("maxpool2x_floor", case_maxpool_floor),
    ("upsample", case_upsample),
    ("concat", case_concat),
    ("linear", case_linear),
    ("softmax_ce", case_softmax_ce),
    ("smooth_l1", case_smooth_l1),
    ("l2_normalize", case_l2_normalize),
    ("roi_pool", case_roi_pool),
    ("gather", case_gather),
    ("reshape", case_reshape),
    ("scale", case_scale),
    ("weighted_sum", case_weighted_sum),
    ("dot", case_dot),
    ("lateral_topdown_tout_rpn", case_composed),
];

fn case_dot(seed: u64) -> Result<GradCheckReport> {
    let r = rand_tensor(&[5], seed, 4);
    grad_check(move |g, v| g.dot(v[0], r.clone()), &[rand_tensor(&[5], seed, 1)], GradCheckOptions::default())
}

/// Every case for every seed.
pub fn suite(seeds: &[u64]) -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    for &(op, f) in SUITE_CASES.iter() {
        for &seed in seeds {
            out.push(SuiteCase {
                op: op.to_string(),
                seed,
                report: f(seed)?,
            });
        }
    }
    Ok(out)
}
