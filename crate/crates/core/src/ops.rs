//! Forward and backward kernels for every differentiable primitive.
//!
//! These are plain functions over [`Tensor`]s; [`crate::autograd::Graph`]
//! records them on a tape and chains the backward kernels.

use crate::error::{Result, TdmError};
use crate::tensor::{gemm, Real, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride,
            pad,
            dilation,
        }
    }

    /// Output extent along one axis, or `None` when it would be < 1.
    pub fn out_dim(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

pub(crate) struct ConvCache {
    /// im2col matrix `[H'W', Kh*Kw*Cin]`; `None` for a plain 1x1 conv.
    col: Option<Vec<Real>>,
}

fn conv_dims(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeometry) -> Result<[usize; 8]> {
    let (h, wd, cin) = x.hwc()?;
    let (kh, kw, wcin, cout) = match w.shape() {
        &[a, b, c, d] => (a, b, c, d),
        s => return Err(TdmError::shape("conv2d", format!("kernel rank {:?}", s))),
    };
    if wcin != cin {
        return Err(TdmError::shape(
            "conv2d",
            format!("input has {} channels, kernel expects {}", cin, wcin),
        ));
    }
    if b.len() != cout {
        return Err(TdmError::shape(
            "conv2d",
            format!("bias has {} values, kernel has {} outputs", b.len(), cout),
        ));
    }
    if g.stride < 1 || g.dilation < 1 || kh == 0 || kw == 0 {
        return Err(TdmError::Invalid(format!("conv geometry {:?}", g)));
    }
    let oh = g.out_dim(h, kh);
    let ow = g.out_dim(wd, kw);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok([h, wd, cin, kh, kw, cout, oh, ow]),
        _ => Err(TdmError::OutputSize {
            op: "conv2d",
            detail: format!("{}x{} input, {}x{} kernel, {:?}", h, wd, kh, kw, g),
        }),
    }
}

fn is_pointwise(kh: usize, kw: usize, g: ConvGeometry) -> bool {
    kh == 1 && kw == 1 && g.stride == 1 && g.pad == 0
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    g: ConvGeometry,
) -> Result<(Tensor, ConvCache)> {
    let [h, wd, cin, kh, kw, cout, oh, ow] = conv_dims(x, w, b, g)?;
    let rows = oh * ow;
    let kdim = kh * kw * cin;
    let col = if is_pointwise(kh, kw, g) {
        None
    } else {
        let mut col = vec![0.0 as Real; rows * kdim];
        let xd = x.data();
        for oy in 0..oh {
            for ox in 0..ow {
                let r = oy * ow + ox;
                for ky in 0..kh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let src = (iy as usize * wd + ix as usize) * cin;
                        let dst = r * kdim + (ky * kw + kx) * cin;
                        col[dst..dst + cin].copy_from_slice(&xd[src..src + cin]);
                    }
                }
            }
        }
        Some(col)
    };
    let mut out = vec![0.0 as Real; rows * cout];
    for row in out.chunks_exact_mut(cout) {
        row.copy_from_slice(b.data());
    }
    let a: &[Real] = col.as_deref().unwrap_or(x.data());
    gemm(rows, kdim, cout, a, kdim, 1, w.data(), cout, 1, 1.0, &mut out, cout);
    Ok((Tensor::new(vec![oh, ow, cout], out)?, ConvCache { col }))
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: ConvGeometry,
    cache: &ConvCache,
    dout: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ws = w.shape();
    let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
    let (oh, ow) = (dout.shape()[0], dout.shape()[1]);
    let rows = oh * ow;
    let kdim = kh * kw * cin;
    let a: &[Real] = cache.col.as_deref().unwrap_or(x.data());
    let dd = dout.data();

    let mut db = vec![0.0 as Real; cout];
    for row in dd.chunks_exact(cout) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += *v;
        }
    }
    // dW[K, Cout] = col^T[K, rows] * dout[rows, Cout]
    let mut dw = vec![0.0 as Real; kdim * cout];
    gemm(kdim, rows, cout, a, 1, kdim, dd, cout, 1, 0.0, &mut dw, cout);

    let dx = if need_dx {
        // dcol[rows, K] = dout[rows, Cout] * W^T[Cout, K]
        let mut dcol = vec![0.0 as Real; rows * kdim];
        gemm(rows, cout, kdim, dd, cout, 1, w.data(), 1, cout, 0.0, &mut dcol, kdim);
        if is_pointwise(kh, kw, g) {
            Some(Tensor::new(vec![h, wd, cin], dcol).expect("pointwise dx shape"))
        } else {
            let mut dx = vec![0.0 as Real; h * wd * cin];
            for oy in 0..oh {
                for ox in 0..ow {
                    let r = oy * ow + ox;
                    for ky in 0..kh {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let dst = (iy as usize * wd + ix as usize) * cin;
                            let src = r * kdim + (ky * kw + kx) * cin;
                            for c in 0..cin {
                                dx[dst + c] += dcol[src + c];
                            }
                        }
                    }
                }
            }
            Some(Tensor::new(vec![h, wd, cin], dx).expect("dx shape"))
        }
    } else {
        None
    };
    (
        dx,
        Tensor::new(ws.to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![cout], db).expect("db shape"),
    )
}

pub(crate) fn relu_forward(x: &Tensor) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        // NaN passes through so the graph's finiteness check sees it.
        x.data().iter().map(|&v| if v < 0.0 { 0.0 } else if v > 0.0 || v.is_nan() { v } else { 0.0 }).collect(),
    )
    .expect("same shape")
}

pub(crate) fn relu_backward(x: &Tensor, dout: &Tensor) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(dout.data())
            .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
            .collect(),
    )
    .expect("same shape")
}

/// How a 2x2/stride-2 pool treats an odd trailing row or column.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolRounding {
    /// Keep a truncated one-wide edge window: `ceil(n / 2)` outputs.
    #[default]
    Ceil,
    /// Drop the trailing odd row/column: `floor(n / 2)` outputs.
    Floor,
}

impl PoolRounding {
    pub fn out_dim(self, n: usize) -> usize {
        match self {
            PoolRounding::Ceil => n.div_ceil(2),
            PoolRounding::Floor => n / 2,
        }
    }
}

pub(crate) fn maxpool2x_forward(
    x: &Tensor,
    rounding: [PoolRounding; 2],
) -> Result<(Tensor, Vec<u32>)> {
    let (h, w, c) = x.hwc()?;
    if h < 2 || w < 2 {
        return Err(TdmError::OutputSize {
            op: "maxpool2x",
            detail: format!("{}x{} input", h, w),
        });
    }
    let oh = rounding[0].out_dim(h);
    let ow = rounding[1].out_dim(w);
    if oh == 0 || ow == 0 {
        return Err(TdmError::OutputSize {
            op: "maxpool2x",
            detail: format!("{}x{} input pools to {}x{}", h, w, oh, ow),
        });
    }
    let xd = x.data();
    let mut out = vec![0.0 as Real; oh * ow * c];
    let mut arg = vec![0u32; oh * ow * c];
    for oy in 0..oh {
        let y_end = (2 * oy + 2).min(h);
        for ox in 0..ow {
            let x_end = (2 * ox + 2).min(w);
            let o = (oy * ow + ox) * c;
            for ch in 0..c {
                let mut best = Real::NEG_INFINITY;
                let mut best_i = 0usize;
                for iy in 2 * oy..y_end {
                    for ix in 2 * ox..x_end {
                        let i = (iy * w + ix) * c + ch;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out[o + ch] = best;
                arg[o + ch] = best_i as u32;
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, arg))
}

pub(crate) fn scatter_backward(input_shape: &[usize], arg: &[u32], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in arg.iter().zip(dout.data()) {
        d[i as usize] += g;
    }
    dx
}

/// Source index along one axis for nearest-neighbour resizing.
#[inline]
pub fn nearest_src(i: usize, input: usize, output: usize) -> usize {
    i * input / output
}

/// Accepted target range for nearest upsampling: no shrinking, at most `2n + 1`.
pub fn upsample_target_ok(input: usize, target: usize) -> bool {
    target >= input && target <= 2 * input + 1
}

pub(crate) fn upsample_forward(x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    if !upsample_target_ok(h, th) || !upsample_target_ok(w, tw) {
        return Err(TdmError::shape(
            "upsample2x",
            format!("cannot upsample {}x{} to {}x{}", h, w, th, tw),
        ));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(th * tw * c);
    for i in 0..th {
        let sy = nearest_src(i, h, th);
        for j in 0..tw {
            let sx = nearest_src(j, w, tw);
            let s = (sy * w + sx) * c;
            out.extend_from_slice(&xd[s..s + c]);
        }
    }
    Tensor::new(vec![th, tw, c], out)
}

pub(crate) fn upsample_backward(input_shape: &[usize], dout: &Tensor) -> Tensor {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let (th, tw) = (dout.shape()[0], dout.shape()[1]);
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    let dd = dout.data();
    for i in 0..th {
        let sy = nearest_src(i, h, th);
        for j in 0..tw {
            let sx = nearest_src(j, w, tw);
            let s = (sy * w + sx) * c;
            let o = (i * tw + j) * c;
            for ch in 0..c {
                d[s + ch] += dd[o + ch];
            }
        }
    }
    dx
}

/// Concatenate along the last axis; all leading dims must agree.
pub(crate) fn concat_last_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        if sa.len() == 3 && sb.len() == 3 {
            return Err(TdmError::Alignment {
                op: "concat_channels",
                a: (sa[0], sa[1]),
                b: (sb[0], sb[1]),
            });
        }
        return Err(TdmError::shape(
            "concat_channels",
            format!("{:?} vs {:?}", sa, sb),
        ));
    }
    let (ca, cb) = (a.last_dim(), b.last_dim());
    let rows = if ca > 0 { a.len() / ca } else { b.len() / cb.max(1) };
    let mut out = Vec::with_capacity(a.len() + b.len());
    for r in 0..rows {
        out.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        out.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    Tensor::new(shape, out)
}

/// Copy channels `[start, start + len)` of the last axis.
pub fn slice_last(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let c = x.last_dim();
    if start + len > c {
        return Err(TdmError::shape(
            "slice_channels",
            format!("[{}, {}) of {} channels", start, start + len, c),
        ));
    }
    let rows = if c > 0 { x.len() / c } else { 0 };
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&x.data()[r * c + start..r * c + start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Tensor::new(shape, out)
}

fn linear_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (out_dim, in_dim) = match w.shape() {
        &[o, i] => (o, i),
        s => return Err(TdmError::shape("linear", format!("weight shape {:?}", s))),
    };
    if x.last_dim() != in_dim || x.len() % in_dim.max(1) != 0 {
        return Err(TdmError::shape(
            "linear",
            format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
        ));
    }
    if b.len() != out_dim {
        return Err(TdmError::shape(
            "linear",
            format!("bias {} vs {} outputs", b.len(), out_dim),
        ));
    }
    Ok((x.len() / in_dim.max(1), in_dim, out_dim))
}

/// `y = x W^T + b` over the rows of `x` (`W` is `[out, in]`).
pub(crate) fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, i, o) = linear_dims(x, w, b)?;
    let mut out = vec![0.0 as Real; n * o];
    for row in out.chunks_exact_mut(o) {
        row.copy_from_slice(b.data());
    }
    gemm(n, i, o, x.data(), i, 1, w.data(), 1, i, 1.0, &mut out, o);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = o;
    Tensor::new(shape, out)
}

pub(crate) fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    let n = x.len() / i.max(1);
    let dd = dout.data();
    let mut dx = vec![0.0 as Real; n * i];
    gemm(n, o, i, dd, o, 1, w.data(), i, 1, 0.0, &mut dx, i);
    let mut dw = vec![0.0 as Real; o * i];
    gemm(o, n, i, dd, 1, o, x.data(), i, 1, 0.0, &mut dw, i);
    let mut db = vec![0.0 as Real; o];
    for row in dd.chunks_exact(o) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += *v;
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx"),
        Tensor::new(vec![o, i], dw).expect("dw"),
        Tensor::new(vec![o], db).expect("db"),
    )
}

/// Row-wise softmax probabilities of a `[N, K]` (or `[K]`) logit tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.last_dim();
    let mut p = logits.data().to_vec();
    for row in p.chunks_exact_mut(k.max(1)) {
        let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(logits.shape().to_vec(), p).expect("same shape")
}

/// Mean cross-entropy over rows; returns `(loss, probabilities)`.
pub(crate) fn softmax_ce_forward(logits: &Tensor, labels: &[usize]) -> Result<(Real, Tensor)> {
    let k = logits.last_dim();
    let n = if k > 0 { logits.len() / k } else { 0 };
    if n != labels.len() || n == 0 {
        return Err(TdmError::shape(
            "softmax_ce",
            format!("{} rows of logits, {} labels", n, labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TdmError::Invalid(format!(
            "softmax_ce label {} out of range for {} classes",
            bad, k
        )));
    }
    let mut loss = 0.0;
    let ld = logits.data();
    for (r, &label) in labels.iter().enumerate() {
        let row = &ld[r * k..(r + 1) * k];
        let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        // ln(sum exp(v - m)) as ln_1p over the non-maximal terms keeps
        // tiny losses exact.
        let top = row.iter().position(|&v| v == m).unwrap_or(0);
        let rest: Real = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != top)
            .map(|(_, v)| (v - m).exp())
            .sum();
        loss += (m - row[label]) + rest.ln_1p();
    }
    Ok((loss / n as Real, softmax_rows(logits)))
}

pub(crate) fn softmax_ce_backward(probs: &Tensor, labels: &[usize], gout: Real) -> Tensor {
    let k = probs.last_dim();
    let n = labels.len() as Real;
    let mut d = probs.data().to_vec();
    for (r, &label) in labels.iter().enumerate() {
        d[r * k + label] -= 1.0;
    }
    for v in d.iter_mut() {
        *v *= gout / n;
    }
    Tensor::new(probs.shape().to_vec(), d).expect("same shape")
}

#[inline]
pub fn smooth_l1_scalar(d: Real) -> Real {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

#[inline]
fn smooth_l1_grad(d: Real) -> Real {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// `sum(weight * smooth_l1(pred - target)) / normalizer`.
pub(crate) fn smooth_l1_forward(
    pred: &Tensor,
    target: &Tensor,
    weights: Option<&Tensor>,
    normalizer: Real,
) -> Result<Real> {
    if pred.shape() != target.shape() {
        return Err(TdmError::shape(
            "smooth_l1",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    if let Some(w) = weights {
        if w.len() != pred.len() {
            return Err(TdmError::shape("smooth_l1", "weight length"));
        }
    }
    let mut s = 0.0;
    for i in 0..pred.len() {
        let wt = weights.map_or(1.0, |w| w.data()[i]);
        if wt != 0.0 {
            s += wt * smooth_l1_scalar(pred.data()[i] - target.data()[i]);
        }
    }
    Ok(s / normalizer)
}

pub(crate) fn smooth_l1_backward(
    pred: &Tensor,
    target: &Tensor,
    weights: Option<&Tensor>,
    normalizer: Real,
    gout: Real,
) -> Tensor {
    Tensor::from_fn(pred.shape(), |i| {
        let wt = weights.map_or(1.0, |w| w.data()[i]);
        wt * smooth_l1_grad(pred.data()[i] - target.data()[i]) * gout / normalizer
    })
}

/// Unit-normalise each last-axis vector; zero vectors pass through with norm 0.
pub fn l2_normalize_forward(x: &Tensor) -> (Tensor, Vec<Real>) {
    let c = x.last_dim().max(1);
    let mut out = x.data().to_vec();
    let mut norms = Vec::with_capacity(x.len() / c);
    for row in out.chunks_exact_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<Real>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
        norms.push(n);
    }
    (Tensor::new(x.shape().to_vec(), out).expect("same shape"), norms)
}

pub(crate) fn l2_normalize_backward(y: &Tensor, norms: &[Real], dout: &Tensor) -> Tensor {
    let c = y.last_dim().max(1);
    let mut dx = vec![0.0 as Real; y.len()];
    for (r, &n) in norms.iter().enumerate() {
        if n <= 0.0 {
            continue;
        }
        let yr = &y.data()[r * c..(r + 1) * c];
        let dr = &dout.data()[r * c..(r + 1) * c];
        let dot: Real = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for k in 0..c {
            dx[r * c + k] = (dr[k] - yr[k] * dot) / n;
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("same shape")
}

/// Half-open cell range `[floor(a), ceil(b))` clipped to `[0, n)`.
#[inline]
fn bin_cells(a: f64, b: f64, n: usize) -> (usize, usize) {
    let s = a.floor().max(0.0).min(n as f64) as usize;
    let e = b.ceil().max(0.0).min(n as f64) as usize;
    (s, e)
}

/// Bin edges of one ROI along one axis, in feature cells.
pub fn roi_bin_edges(lo: f64, hi: f64, stride: f64, bins: usize, p: usize) -> (f64, f64) {
    let a = lo / stride;
    let extent = (hi / stride - a).max(1.0);
    let bw = extent / bins as f64;
    (a + p as f64 * bw, a + (p + 1) as f64 * bw)
}

/// Max-in-bin ROI pooling of `[H, W, C]` into `[R, out_h, out_w, C]`.
/// `rois` are `[x1, y1, x2, y2]` image coordinates. Empty bins yield 0
/// and carry argmax `u32::MAX`.
pub(crate) fn roi_pool_forward(
    x: &Tensor,
    rois: &[[f64; 4]],
    stride: f64,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor, Vec<u32>)> {
    let (h, w, c) = x.hwc()?;
    if out_h == 0 || out_w == 0 {
        return Err(TdmError::Invalid("roi_pool output size must be positive".into()));
    }
    let (img_w, img_h) = (w as f64 * stride, h as f64 * stride);
    let xd = x.data();
    let mut out = vec![0.0 as Real; rois.len() * out_h * out_w * c];
    let mut arg = vec![u32::MAX; out.len()];
    for (r, roi) in rois.iter().enumerate() {
        if roi[2] <= 0.0 || roi[3] <= 0.0 || roi[0] >= img_w || roi[1] >= img_h {
            return Err(TdmError::Invalid(format!(
                "roi {:?} lies outside the {}x{} image",
                roi, img_w, img_h
            )));
        }
        for py in 0..out_h {
            let (a, b) = roi_bin_edges(roi[1], roi[3], stride, out_h, py);
            let (ys, ye) = bin_cells(a, b, h);
            for px in 0..out_w {
                let (a, b) = roi_bin_edges(roi[0], roi[2], stride, out_w, px);
                let (xs, xe) = bin_cells(a, b, w);
                let o = ((r * out_h + py) * out_w + px) * c;
                if ys >= ye || xs >= xe {
                    continue;
                }
                for ch in 0..c {
                    let mut best = Real::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for iy in ys..ye {
                        for ix in xs..xe {
                            let i = (iy * w + ix) * c + ch;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out[o + ch] = best;
                    arg[o + ch] = best_i as u32;
                }
            }
        }
    }
    Ok((Tensor::new(vec![rois.len(), out_h, out_w, c], out)?, arg))
}

pub(crate) fn roi_pool_backward(input_shape: &[usize], arg: &[u32], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in arg.iter().zip(dout.data()) {
        if i != u32::MAX {
            d[i as usize] += g;
        }
    }
    dx
}
