//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in execution
//! order, so node parents always precede the node. [`Tape::backward`] walks the
//! recorded nodes once in reverse and accumulates adjoints into the leaves.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{self, broadcast_binary, expand_to, sum_to_shape, ReduceKind, Tensor};

pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf adjoints produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Relu,
    Sigmoid,
}

/// Source of normalization statistics for [`Var::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    Batch,
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel moments of the batch that was normalized.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.var(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.var(value, false)
    }

    pub fn var(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    fn push(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Accumulate d(loss)/d(leaf) for every leaf that requires a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(
            std::ptr::eq(self, loss.tape),
            "loss recorded on another tape"
        );
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                output: &node.value,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        let v = self.tensor();
        self.tape.constant(v)
    }

    pub fn binary(self, op: BinaryOp, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = match op {
            BinaryOp::Add => broadcast_binary("add", &a, &b, |x, y| x + y)?,
            BinaryOp::Sub => broadcast_binary("sub", &a, &b, |x, y| x - y)?,
            BinaryOp::Mul => broadcast_binary("mul", &a, &b, |x, y| x * y)?,
            BinaryOp::Div => broadcast_binary("div", &a, &b, |x, y| x / y)?,
        };
        drop((a, b));
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |c| {
                let (a, b, g) = (c.inputs[0], c.inputs[1], c.grad);
                let (ga, gb) = match op {
                    BinaryOp::Add => (g.clone(), g.clone()),
                    BinaryOp::Sub => (g.clone(), g.map(|v| -v)),
                    BinaryOp::Mul => (
                        broadcast_binary("mul", g, b, |x, y| x * y).unwrap(),
                        broadcast_binary("mul", g, a, |x, y| x * y).unwrap(),
                    ),
                    BinaryOp::Div => {
                        let ga = broadcast_binary("div", g, b, |x, y| x / y).unwrap();
                        // d(a/b)/db = -out / b
                        let q = broadcast_binary("div", c.output, b, |x, y| x / y).unwrap();
                        let gb = broadcast_binary("mul", g, &q, |x, y| -x * y).unwrap();
                        (ga, gb)
                    }
                };
                vec![
                    Some(sum_to_shape(&ga, a.shape())),
                    Some(sum_to_shape(&gb, b.shape())),
                ]
            }),
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn unary(self, op: UnaryOp) -> Result<Var<'t>> {
        let x = self.value();
        let out = match op {
            UnaryOp::Neg => x.map(|v| -v),
            UnaryOp::Exp => x.map(f64::exp),
            UnaryOp::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive argument {bad}"),
                    });
                }
                x.map(f64::ln)
            }
            UnaryOp::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            UnaryOp::Sigmoid => x.map(sigmoid),
        };
        drop(x);
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |c| {
                let (x, y, g) = (c.inputs[0], c.output, c.grad);
                let data: Vec<f64> = match op {
                    UnaryOp::Neg => g.data().iter().map(|v| -v).collect(),
                    UnaryOp::Exp => g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect(),
                    UnaryOp::Log => g.data().iter().zip(x.data()).map(|(g, x)| g / x).collect(),
                    UnaryOp::Relu => g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                    UnaryOp::Sigmoid => g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect(),
                };
                vec![Some(Tensor::new(x.shape(), data).unwrap())]
            }),
        ))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryOp::Neg).expect("neg is total")
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryOp::Exp).expect("exp is total")
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Log)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryOp::Relu).expect("relu is total")
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryOp::Sigmoid).expect("sigmoid is total")
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t> {
        let out = self.value().map(|v| v * s);
        self.tape.push(
            out,
            &[self],
            Box::new(move |c| vec![Some(c.grad.map(|g| g * s))]),
        )
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let out = self.value().map(|v| v + s);
        self.tape
            .push(out, &[self], Box::new(|c| vec![Some(c.grad.clone())]))
    }

    pub fn reduce(self, kind: ReduceKind, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        let r = tensor::reduce(&self.value(), axes, keepdim, kind)?;
        let kept = r.kept_shape;
        let argmax = r.argmax;
        let count = r.count as f64;
        Ok(self.tape.push(
            r.value,
            &[self],
            Box::new(move |c| {
                let x = c.inputs[0];
                let g = c.grad.clone().reshape(kept.clone()).unwrap();
                let gx = match kind {
                    ReduceKind::Sum => expand_to(&g, x.shape()),
                    ReduceKind::Mean => expand_to(&g, x.shape()).map(|v| v / count),
                    ReduceKind::Max => {
                        let mut d = Tensor::zeros(x.shape());
                        for (o, &i) in argmax.iter().enumerate() {
                            d.data_mut()[i] += g.data()[o];
                        }
                        d
                    }
                };
                vec![Some(gx)]
            }),
        ))
    }

    pub fn sum(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum, axes, keepdim)
    }

    pub fn mean(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Mean, axes, keepdim)
    }

    pub fn max(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Max, axes, keepdim)
    }

    pub fn sum_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.sum(&axes, false).expect("all axes are valid")
    }

    pub fn mean_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.mean(&axes, false).expect("all axes are valid")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.tensor().reshape(shape.to_vec())?;
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(|c| {
                let s = c.inputs[0].shape().to_vec();
                vec![Some(c.grad.clone().reshape(s).unwrap())]
            }),
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(shape_err("transpose", x.shape(), &[0, 0]));
        }
        let out = transpose2(&x);
        drop(x);
        Ok(self
            .tape
            .push(out, &[self], Box::new(|c| vec![Some(transpose2(c.grad))])))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(&mut out, a.data(), b.data(), m, k, n);
        drop((a, b));
        Ok(self.tape.push(
            Tensor::new([m, n], out)?,
            &[self, other],
            Box::new(move |c| {
                let (a, b, g) = (c.inputs[0], c.inputs[1], c.grad);
                let mut ga = vec![0.0; m * k];
                kernels::gemm_a_bt_acc(&mut ga, g.data(), b.data(), m, n, k);
                let mut gb = vec![0.0; k * n];
                kernels::gemm_at_b_acc(&mut gb, a.data(), g.data(), k, m, n);
                vec![
                    Some(Tensor::new([m, k], ga).unwrap()),
                    Some(Tensor::new([k, n], gb).unwrap()),
                ]
            }),
        ))
    }

    /// Cross-correlation of an `N×C×H×W` input with an `O×C×kh×kw` kernel.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
            return Err(shape_err("conv2d", x.shape(), w.shape()));
        }
        let (n, in_c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (out_c, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        if stride == 0 || kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::Domain {
                op: "conv2d",
                detail: format!(
                    "kernel {kh}x{kw} (stride {stride}) larger than padded input {}x{}",
                    h + 2 * pad,
                    wd + 2 * pad
                ),
            });
        }
        let g = ConvGeom {
            in_c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        if let Some(b) = bias {
            let bs = b.shape();
            if bs != [out_c] {
                return Err(shape_err("conv2d bias", &bs, &[out_c]));
            }
        }
        let (rows, p) = (g.rows(), g.cols());
        let sample = in_c * h * wd;
        let mut cols = vec![0.0; n * rows * p];
        let mut out = vec![0.0; n * out_c * p];
        let bias_vals = bias.map(|b| b.tensor().into_data());
        for s in 0..n {
            let col = &mut cols[s * rows * p..(s + 1) * rows * p];
            kernels::im2col(&x.data()[s * sample..(s + 1) * sample], &g, col);
            let o = &mut out[s * out_c * p..(s + 1) * out_c * p];
            if let Some(bv) = &bias_vals {
                for (oc, &b) in bv.iter().enumerate() {
                    o[oc * p..(oc + 1) * p].fill(b);
                }
            }
            kernels::gemm_acc(o, w.data(), col, out_c, rows, p);
        }
        drop((x, w));
        let out = Tensor::new([n, out_c, g.out_h, g.out_w], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape.push(
            out,
            &parents,
            Box::new(move |c| {
                let (w, gr) = (c.inputs[1], c.grad);
                let mut dx = vec![0.0; n * sample];
                let mut dw = vec![0.0; out_c * rows];
                let mut dcol = vec![0.0; rows * p];
                for s in 0..n {
                    let gs = &gr.data()[s * out_c * p..(s + 1) * out_c * p];
                    let col = &cols[s * rows * p..(s + 1) * rows * p];
                    kernels::gemm_a_bt_acc(&mut dw, gs, col, out_c, p, rows);
                    dcol.fill(0.0);
                    kernels::gemm_at_b_acc(&mut dcol, w.data(), gs, rows, out_c, p);
                    kernels::col2im_acc(&dcol, &g, &mut dx[s * sample..(s + 1) * sample]);
                }
                let mut res = vec![
                    Some(Tensor::new([n, in_c, h, wd], dx).unwrap()),
                    Some(Tensor::new([out_c, in_c, kh, kw], dw).unwrap()),
                ];
                if c.inputs.len() == 3 {
                    let mut db = vec![0.0; out_c];
                    for s in 0..n {
                        for (oc, d) in db.iter_mut().enumerate() {
                            let base = (s * out_c + oc) * p;
                            *d += gr.data()[base..base + p].iter().sum::<f64>();
                        }
                    }
                    res.push(Some(Tensor::vector(&db)));
                }
                res
            }),
        ))
    }

    /// Per-channel affine normalization of an `N×C×H×W` input.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var<'t>, Option<BatchMoments>)> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(shape_err("batch_norm", x.shape(), &[0, 0, 0, 0]));
        }
        let (n, ch) = (x.shape()[0], x.shape()[1]);
        let sp = x.shape()[2] * x.shape()[3];
        let (gv, bv) = (gamma.tensor(), beta.tensor());
        if gv.shape() != [ch] || bv.shape() != [ch] {
            return Err(shape_err("batch_norm affine", gv.shape(), &[ch]));
        }
        let m = n * sp;
        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                if m < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "{n} sample(s) with {sp} spatial cell(s) per channel"
                    )));
                }
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for c in 0..ch {
                    let mut s = 0.0;
                    for i in 0..n {
                        let base = (i * ch + c) * sp;
                        s += x.data()[base..base + sp].iter().sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut v = 0.0;
                    for i in 0..n {
                        let base = (i * ch + c) * sp;
                        v += x.data()[base..base + sp]
                            .iter()
                            .map(|t| (t - mu) * (t - mu))
                            .sum::<f64>();
                    }
                    mean[c] = mu;
                    var[c] = v / m as f64;
                }
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: m,
                };
                (mean, var, Some(moments))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(shape_err("batch_norm stats", &[mean.len()], &[ch]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let batch_mode = matches!(stats, NormStats::Batch);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.numel()];
        let mut y = vec![0.0; x.numel()];
        for i in 0..n {
            for c in 0..ch {
                let base = (i * ch + c) * sp;
                for k in base..base + sp {
                    let h = (x.data()[k] - mean[c]) * inv[c];
                    xhat[k] = h;
                    y[k] = gv.data()[c] * h + bv.data()[c];
                }
            }
        }
        let out = Tensor::new(x.shape(), y)?;
        drop(x);
        let var = self.tape.push(
            out,
            &[self, gamma, beta],
            Box::new(move |c| {
                let (gam, g) = (c.inputs[1], c.grad);
                let mut dx = vec![0.0; g.numel()];
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for cc in 0..ch {
                    let mut sg = 0.0;
                    let mut sgx = 0.0;
                    for i in 0..n {
                        let base = (i * ch + cc) * sp;
                        for k in base..base + sp {
                            sg += g.data()[k];
                            sgx += g.data()[k] * xhat[k];
                        }
                    }
                    dgamma[cc] = sgx;
                    dbeta[cc] = sg;
                    let gi = gam.data()[cc] * inv[cc];
                    for i in 0..n {
                        let base = (i * ch + cc) * sp;
                        for k in base..base + sp {
                            dx[k] = if batch_mode {
                                gi * (g.data()[k] - sg / m as f64 - xhat[k] * sgx / m as f64)
                            } else {
                                gi * g.data()[k]
                            };
                        }
                    }
                }
                vec![
                    Some(Tensor::new(g.shape(), dx).unwrap()),
                    Some(Tensor::vector(&dgamma)),
                    Some(Tensor::vector(&dbeta)),
                ]
            }),
        );
        Ok((var, moments))
    }

    /// 2×2 max pooling with stride 2 over the last two axes of a rank-4 input.
    pub fn maxpool2(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 4 || x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0 {
            return Err(Error::Domain {
                op: "maxpool2",
                detail: format!("spatial dims must be even, got {:?}", x.shape()),
            });
        }
        let (nc, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; nc * oh * ow];
        let mut arg = vec![0usize; nc * oh * ow];
        for p in 0..nc {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = usize::MAX;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let k = (p * h + 2 * i + di) * w + 2 * j + dj;
                        if best == usize::MAX || x.data()[k] > x.data()[best] {
                            best = k;
                        }
                    }
                    let o = (p * oh + i) * ow + j;
                    out[o] = x.data()[best];
                    arg[o] = best;
                }
            }
        }
        let shape = [x.shape()[0], x.shape()[1], oh, ow];
        drop(x);
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            &[self],
            Box::new(move |c| {
                let mut d = Tensor::zeros(c.inputs[0].shape());
                for (o, &k) in arg.iter().enumerate() {
                    d.data_mut()[k] += c.grad.data()[o];
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Nearest-neighbour ×2 upsampling of the last two axes of a rank-4 input.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(shape_err("upsample2", x.shape(), &[0, 0, 0, 0]));
        }
        let (nc, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; nc * oh * ow];
        for p in 0..nc {
            for i in 0..oh {
                for j in 0..ow {
                    out[(p * oh + i) * ow + j] = x.data()[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let shape = [x.shape()[0], x.shape()[1], oh, ow];
        drop(x);
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            &[self],
            Box::new(move |c| {
                let mut d = Tensor::zeros(c.inputs[0].shape());
                for p in 0..nc {
                    for i in 0..oh {
                        for j in 0..ow {
                            d.data_mut()[(p * h + i / 2) * w + j / 2] +=
                                c.grad.data()[(p * oh + i) * ow + j];
                        }
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// `x − max − log Σ exp(x − max)` along `axis`.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::InvalidAxis {
                axis,
                rank: x.rank(),
            });
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len)
                    .map(|k| x.data()[at(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..len)
                    .map(|k| (x.data()[at(k)] - mx).exp())
                    .sum::<f64>()
                    .ln();
                for k in 0..len {
                    out[at(k)] = x.data()[at(k)] - mx - lse;
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        drop(x);
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |c| {
                let (y, g) = (c.output, c.grad);
                let mut d = vec![0.0; g.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let sg: f64 = (0..len).map(|k| g.data()[at(k)]).sum();
                        for k in 0..len {
                            d[at(k)] = g.data()[at(k)] - y.data()[at(k)].exp() * sg;
                        }
                    }
                }
                vec![Some(Tensor::new(g.shape(), d).unwrap())]
            }),
        ))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        Ok(self.log_softmax(axis)?.exp())
    }

    /// Mean of `−self[n, label, h, w]` over pixels whose label is not `ignore`.
    ///
    /// `self` holds log-probabilities of shape `N×C×H×W`; `labels` is `N·H·W` long.
    pub fn nll(self, labels: &[usize], ignore: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(shape_err("nll", x.shape(), &[0, 0, 0, 0]));
        }
        let (n, classes) = (x.shape()[0], x.shape()[1]);
        let sp = x.shape()[2] * x.shape()[3];
        if labels.len() != n * sp {
            return Err(shape_err("nll labels", &[labels.len()], &[n * sp]));
        }
        let mut picks = Vec::with_capacity(labels.len());
        for (i, &l) in labels.iter().enumerate() {
            if l == ignore {
                continue;
            }
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            let (s, k) = (i / sp, i % sp);
            picks.push((s * classes + l) * sp + k);
        }
        if picks.is_empty() {
            return Err(Error::EmptyMean("every pixel carries the ignore label"));
        }
        let count = picks.len() as f64;
        let loss = -picks.iter().map(|&k| x.data()[k]).sum::<f64>() / count;
        drop(x);
        Ok(self.tape.push(
            Tensor::scalar(loss),
            &[self],
            Box::new(move |c| {
                let g = c.grad.data()[0];
                let mut d = Tensor::zeros(c.inputs[0].shape());
                for &k in &picks {
                    d.data_mut()[k] -= g / count;
                }
                vec![Some(d)]
            }),
        ))
    }
}

/// Concatenate along `axis`; all other dims must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or(Error::MissingInput("concat of nothing"))?;
    let tape = first.tape;
    let values: Vec<Tensor> = parts.iter().map(|p| p.tensor()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: base.len(),
        });
    }
    for v in &values[1..] {
        let s = v.shape();
        let ok = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(shape_err("concat", &base, s));
        }
    }
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let (outer, _, inner) = split_axis(&base, axis);
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&sizes) {
            out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    Ok(tape.push(
        Tensor::new(out_shape, out)?,
        parts,
        Box::new(move |c| {
            let mut grads: Vec<Vec<f64>> = sizes
                .iter()
                .map(|&l| Vec::with_capacity(outer * l * inner))
                .collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (g, &len) in grads.iter_mut().zip(&sizes) {
                    g.extend_from_slice(&c.grad.data()[off..off + len * inner]);
                    off += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(&c.inputs)
                .map(|(g, x)| Some(Tensor::new(x.shape(), g).unwrap()))
                .collect()
        }),
    ))
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new([c, r], out).unwrap()
}
