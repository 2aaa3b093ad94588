//! Tape-based reverse-mode differentiation over the primitives in [`crate::ops`].
//!
//! A [`Graph`] lives for one forward/backward pass. Parameters are copied in
//! from a [`ParamStore`] by name and their gradients are accumulated back with
//! [`Graph::accumulate_param_grads`].

use std::collections::BTreeSet;

use crate::error::{Result, TdmError};
use crate::ops::{self, ConvCache, ConvGeometry, PoolRounding};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        cache: ConvCache,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    Upsample(Var),
    Concat(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    SmoothL1 {
        pred: Var,
        target: Tensor,
        weights: Option<Tensor>,
        normalizer: Real,
    },
    L2Normalize {
        x: Var,
        norms: Vec<Real>,
    },
    RoiPool {
        x: Var,
        arg: Vec<u32>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Scale {
        x: Var,
        s: Var,
    },
    WeightedSum {
        terms: Vec<(Var, Real)>,
    },
    Dot {
        x: Var,
        r: Tensor,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Relu(x) | Op::Upsample(x) | Op::Reshape(x) => vec![*x],
            Op::MaxPool { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::RoiPool { x, .. }
            | Op::Gather { x, .. }
            | Op::Dot { x, .. } => vec![*x],
            Op::Concat(a, b) => vec![*a, *b],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::SmoothL1 { pred, .. } => vec![*pred],
            Op::Scale { x, s } => vec![*x, *s],
            Op::WeightedSum { terms } => terms.iter().map(|t| t.0).collect(),
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
    param: Option<String>,
    label: Option<String>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TdmError::NonFinite { op: name });
        }
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            param: None,
            label: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            grad: None,
            requires_grad,
            op: Op::Leaf,
            param: None,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf copied from `store[name]`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let p = store.get(name)?;
        let v = self.leaf(p.value.clone(), true);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn scalar(&self, v: Var) -> Real {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    /// Labels of `v` and every node it was computed from.
    pub fn ancestor_labels(&self, v: Var) -> BTreeSet<String> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![v];
        let mut labels = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if seen[n.0] {
                continue;
            }
            seen[n.0] = true;
            if let Some(l) = &self.nodes[n.0].label {
                labels.insert(l.clone());
            }
            stack.extend(self.nodes[n.0].op.parents());
        }
        labels
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let (out, cache) =
            ops::conv2d_forward(self.value(x), self.value(w), self.value(b), geom)?;
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cache,
            },
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu_forward(self.value(x));
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn maxpool2x(&mut self, x: Var, rounding: [PoolRounding; 2]) -> Result<Var> {
        let (out, arg) = ops::maxpool2x_forward(self.value(x), rounding)?;
        self.push(out, Op::MaxPool { x, arg }, "maxpool2x")
    }

    /// Nearest-neighbour upsampling to exactly `th x tw`.
    pub fn upsample(&mut self, x: Var, th: usize, tw: usize) -> Result<Var> {
        let out = ops::upsample_forward(self.value(x), th, tw)?;
        self.push(out, Op::Upsample(x), "upsample2x")
    }

    /// Channel (last-axis) concatenation, `a`'s channels first.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_last_forward(self.value(a), self.value(b))?;
        self.push(out, Op::Concat(a, b), "concat_channels")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(out, Op::Linear { x, w, b }, "linear")
    }

    /// Mean softmax cross-entropy over the rows of `logits`.
    pub fn softmax_ce(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let (loss, probs) = ops::softmax_ce_forward(self.value(logits), &labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            },
            "softmax_ce",
        )
    }

    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: Tensor,
        weights: Option<Tensor>,
        normalizer: Real,
    ) -> Result<Var> {
        let loss = ops::smooth_l1_forward(self.value(pred), &target, weights.as_ref(), normalizer)?;
        self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                target,
                weights,
                normalizer,
            },
            "smooth_l1",
        )
    }

    /// Per-position L2 normalisation over the last axis; also returns the norms.
    pub fn l2_normalize(&mut self, x: Var) -> Result<(Var, Vec<Real>)> {
        let (out, norms) = ops::l2_normalize_forward(self.value(x));
        let v = self.push(
            out,
            Op::L2Normalize {
                x,
                norms: norms.clone(),
            },
            "l2_normalize",
        )?;
        Ok((v, norms))
    }

    pub fn roi_pool(
        &mut self,
        x: Var,
        rois: &[[f64; 4]],
        stride: f64,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let (out, arg) = ops::roi_pool_forward(self.value(x), rois, stride, out_h, out_w)?;
        self.push(out, Op::RoiPool { x, arg }, "roi_pool")
    }

    /// Select flat elements of `x` into a new tensor of `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if index.len() != shape.iter().product::<usize>() {
            return Err(TdmError::shape("gather", "index count does not match shape"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(TdmError::shape("gather", format!("index {} out of range", bad)));
        }
        let data = index.iter().map(|&i| src.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push(out, Op::Gather { x, index }, "gather")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(TdmError::shape("scale", "scale must have one element"));
        }
        let k = self.scalar(s);
        let out = Tensor::from_fn(self.value(x).shape(), |i| self.value(x).data()[i] * k);
        self.push(out, Op::Scale { x, s }, "scale")
    }

    /// `sum_i c_i * t_i` over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, Real)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(TdmError::shape("weighted_sum", "terms must be scalars"));
            }
            s += c * self.scalar(v);
        }
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            "weighted_sum",
        )
    }

    /// `sum(x * r)` for a constant `r` of the same shape.
    pub fn dot(&mut self, x: Var, r: Tensor) -> Result<Var> {
        if self.value(x).shape() != r.shape() {
            return Err(TdmError::shape("dot", "shape mismatch"));
        }
        let s: Real = self
            .value(x)
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a * b)
            .sum();
        self.push(Tensor::scalar(s), Op::Dot { x, r }, "dot")
    }

    /// Reverse pass from a scalar `loss`; previous gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TdmError::shape("backward", "loss must be a scalar"));
        }
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &gout);
            self.nodes[i].grad = Some(gout);
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, gout: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let need = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cache,
            } => {
                let (dx, dw, db) = ops::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *geom,
                    cache,
                    gout,
                    need(x),
                );
                let mut out = vec![(*w, dw), (*b, db)];
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                out
            }
            Op::Relu(x) => vec![(*x, ops::relu_backward(self.value(*x), gout))],
            Op::MaxPool { x, arg } => {
                vec![(*x, ops::scatter_backward(self.value(*x).shape(), arg, gout))]
            }
            Op::Upsample(x) => vec![(*x, ops::upsample_backward(self.value(*x).shape(), gout))],
            Op::Concat(a, b) => {
                let ca = self.value(*a).last_dim();
                let cb = self.value(*b).last_dim();
                vec![
                    (*a, ops::slice_last(gout, 0, ca).expect("concat grad a")),
                    (*b, ops::slice_last(gout, ca, cb).expect("concat grad b")),
                ]
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), gout);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => vec![(
                *logits,
                ops::softmax_ce_backward(probs, labels, gout.data()[0]),
            )],
            Op::SmoothL1 {
                pred,
                target,
                weights,
                normalizer,
            } => vec![(
                *pred,
                ops::smooth_l1_backward(
                    self.value(*pred),
                    target,
                    weights.as_ref(),
                    *normalizer,
                    gout.data()[0],
                ),
            )],
            Op::L2Normalize { x, norms } => {
                vec![(*x, ops::l2_normalize_backward(&node.value, norms, gout))]
            }
            Op::RoiPool { x, arg } => {
                vec![(*x, ops::roi_pool_backward(self.value(*x).shape(), arg, gout))]
            }
            Op::Gather { x, index } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&j, &g) in index.iter().zip(gout.data()) {
                    d[j] += g;
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                vec![(*x, gout.clone().reshape(&shape).expect("reshape grad"))]
            }
            Op::Scale { x, s } => {
                let k = self.scalar(*s);
                let xv = self.value(*x);
                let dx = Tensor::from_fn(xv.shape(), |j| gout.data()[j] * k);
                let ds: Real = xv.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum();
                vec![(*x, dx), (*s, Tensor::scalar(ds))]
            }
            Op::WeightedSum { terms } => {
                let g = gout.data()[0];
                terms
                    .iter()
                    .map(|&(v, c)| (v, Tensor::scalar(c * g)))
                    .collect()
            }
            Op::Dot { x, r } => {
                let g = gout.data()[0];
                vec![(*x, Tensor::from_fn(r.shape(), |j| r.data()[j] * g))]
            }
        }
    }

    /// Add every parameter leaf's gradient into `store`. Parameters that the
    /// loss does not depend on receive a zero gradient.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for node in &self.nodes {
            if let Some(name) = &node.param {
                let p = store.get_mut(name)?;
                if let Some(g) = &node.grad {
                    if !g.is_finite() {
                        return Err(TdmError::NonFinite { op: "backward" });
                    }
                    p.grad.add_assign(g);
                }
                p.has_grad = true;
            }
        }
        Ok(())
    }
}
