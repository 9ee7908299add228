use std::collections::HashMap;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `[.., q] · [q, r]`, leading dims of the left operand flattened.
    MatMul(Var, Var),
    /// Batched `[B, p, q] · [B, q, r]`, or `· [B, r, q]ᵀ` when transposed.
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Right operand's shape is a suffix of the left operand's shape.
    AddBroadcast(Var, Var),
    Scale(Var, f32),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softmax(Var),
    SoftThreshold(Var, f32),
    ShiftedRelu(Var, f32),
    /// Gradient passes only where the mask is set (top-k selection).
    Select(Var, Vec<bool>),
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    /// Normalized rows; keeps the per-row reciprocal standard deviation.
    LayerNorm(Var, Vec<f32>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order; `backward` walks them in exact
/// reverse order. Gradients from a backward call replace those of the
/// previous call unless [`Tape::backward_accumulate`] is used.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    names: HashMap<String, Var>,
    grads: Vec<Option<Vec<f32>>>,
    visit_order: Vec<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a computed value, checking it is finite and setting its
    /// `requires_grad` flag from the inputs.
    fn record(&mut self, name: &str, mut value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(name.to_string()));
        }
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.grad = None;
        Ok(self.push(value, op))
    }

    /// Records a leaf; it participates in gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    /// Records a named parameter leaf (a copy of `t`).
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let mut copy = Tensor::new(&t.shape, t.data.clone()).expect("valid tensor");
        copy.requires_grad = t.requires_grad;
        let v = self.leaf(copy);
        let prev = self.names.insert(name.to_string(), v);
        assert!(prev.is_none(), "parameter {name} registered twice on one tape");
        v
    }

    pub fn var_by_name(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| Tensor::new(&self.nodes[v.0].value.shape, g.to_vec()).expect("grad shape"))
    }

    pub fn grad_by_name(&self, name: &str) -> Option<&[f32]> {
        self.var_by_name(name).and_then(|v| self.grad(v))
    }

    /// Node indices visited by the most recent backward pass, in visit order.
    pub fn backward_visit_order(&self) -> &[usize] {
        &self.visit_order
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.grads = vec![None; self.nodes.len()];
        self.propagate(loss)
    }

    /// Like [`Tape::backward`] but adds onto gradients of earlier calls.
    pub fn backward_accumulate(&mut self, loss: Var) -> Result<()> {
        self.grads.resize(self.nodes.len(), None);
        let previous = std::mem::replace(&mut self.grads, vec![None; self.nodes.len()]);
        self.propagate(loss)?;
        for (g, p) in self.grads.iter_mut().zip(previous) {
            match (g.as_mut(), p) {
                (Some(g), Some(p)) => g.iter_mut().zip(p).for_each(|(a, b)| *a += b),
                (None, Some(p)) => *g = Some(p),
                _ => {}
            }
        }
        Ok(())
    }

    fn propagate(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape)));
        }
        self.visit_order.clear();
        if !lv.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.visit_order.push(i);
            self.node_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contrib: Vec<f32>) {
        if !self.nodes[v.0].value.requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn node_backward(&mut self, i: usize, g: &[f32]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (q, r) = (bv.shape[0], bv.shape[1]);
                let p = av.numel() / q;
                let ga = self.wants(a).then(|| {
                    let mut out = vec![0.0; p * q];
                    kernels::matmul_nt(g, &bv.data, &mut out, p, r, q);
                    out
                });
                let gb = self.wants(b).then(|| {
                    let mut out = vec![0.0; q * r];
                    kernels::matmul_tn(&av.data, g, &mut out, q, p, r);
                    out
                });
                if let Some(ga) = ga {
                    self.accum(a, ga);
                }
                if let Some(gb) = gb {
                    self.accum(b, gb);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (batch, p, q) = (av.shape[0], av.shape[1], av.shape[2]);
                let r = if trans_b { bv.shape[1] } else { bv.shape[2] };
                let ga = self.wants(a).then(|| {
                    let mut out = vec![0.0; batch * p * q];
                    for s in 0..batch {
                        let gs = &g[s * p * r..(s + 1) * p * r];
                        let bs = &bv.data[s * q * r..(s + 1) * q * r];
                        let os = &mut out[s * p * q..(s + 1) * p * q];
                        if trans_b {
                            kernels::matmul_nn(gs, bs, os, p, r, q);
                        } else {
                            kernels::matmul_nt(gs, bs, os, p, r, q);
                        }
                    }
                    out
                });
                let gb = self.wants(b).then(|| {
                    let mut out = vec![0.0; batch * q * r];
                    for s in 0..batch {
                        let gs = &g[s * p * r..(s + 1) * p * r];
                        let as_ = &av.data[s * p * q..(s + 1) * p * q];
                        let os = &mut out[s * q * r..(s + 1) * q * r];
                        if trans_b {
                            // d(bᵀ) = aᵀ g, so d(b) = gᵀ a : [r, q]
                            kernels::matmul_tn(gs, as_, os, r, p, q);
                        } else {
                            kernels::matmul_tn(as_, gs, os, q, p, r);
                        }
                    }
                    out
                });
                if let Some(ga) = ga {
                    self.accum(a, ga);
                }
                if let Some(gb) = gb {
                    self.accum(b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accum(a, g.to_vec());
                self.accum(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(a, g.to_vec());
                self.accum(b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let ga: Vec<f32> = g.iter().zip(&self.nodes[b.0].value.data).map(|(g, y)| g * y).collect();
                let gb: Vec<f32> = g.iter().zip(&self.nodes[a.0].value.data).map(|(g, x)| g * x).collect();
                self.accum(a, ga);
                self.accum(b, gb);
            }
            Op::AddBroadcast(a, b) => {
                let n = self.nodes[b.0].value.numel();
                if self.wants(b) {
                    let mut gb = vec![0.0; n];
                    for chunk in g.chunks_exact(n) {
                        gb.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                    }
                    self.accum(b, gb);
                }
                self.accum(a, g.to_vec());
            }
            Op::Scale(a, s) => self.accum(a, g.iter().map(|x| x * s).collect()),
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[a.0].value.shape[0], self.nodes[a.0].value.shape[1]);
                let mut out = vec![0.0; r * c];
                kernels::transpose(g, &mut out, c, r);
                self.accum(a, out);
            }
            Op::Reshape(a) => self.accum(a, g.to_vec()),
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                self.accum(a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                self.accum(a, vec![g[0] / n as f32; n]);
            }
            Op::SumAxis { x, axis } => {
                let shape = &self.nodes[x.0].value.shape;
                let pre: usize = shape[..axis].iter().product();
                let len = shape[axis];
                let post: usize = shape[axis + 1..].iter().product();
                let mut out = vec![0.0; pre * len * post];
                for a in 0..pre {
                    for k in 0..len {
                        let dst = &mut out[(a * len + k) * post..(a * len + k + 1) * post];
                        dst.copy_from_slice(&g[a * post..(a + 1) * post]);
                    }
                }
                self.accum(x, out);
            }
            Op::Relu(a) => {
                // Subgradient at exactly zero is zero.
                let gx = g.iter().zip(&self.nodes[a.0].value.data).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.accum(a, gx);
            }
            Op::Exp(a) => {
                let gx = g.iter().zip(&self.nodes[i].value.data).map(|(g, y)| g * y).collect();
                self.accum(a, gx);
            }
            Op::Log(a) => {
                let gx = g.iter().zip(&self.nodes[a.0].value.data).map(|(g, &x)| g / x.max(LOG_CLAMP)).collect();
                self.accum(a, gx);
            }
            Op::Sigmoid(a) => {
                let gx = g.iter().zip(&self.nodes[i].value.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accum(a, gx);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let w = y.last_dim();
                let mut gx = vec![0.0; y.numel()];
                for ((yr, gr), out) in y.data.chunks_exact(w).zip(g.chunks_exact(w)).zip(gx.chunks_exact_mut(w)) {
                    let s: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, y), g) in out.iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - s);
                    }
                }
                self.accum(a, gx);
            }
            Op::SoftThreshold(a, lambda) => {
                let gx = g.iter().zip(&self.nodes[a.0].value.data).map(|(g, &x)| if x.abs() > lambda { *g } else { 0.0 }).collect();
                self.accum(a, gx);
            }
            Op::ShiftedRelu(a, lambda) => {
                let gx = g.iter().zip(&self.nodes[a.0].value.data).map(|(g, &x)| if x > lambda { *g } else { 0.0 }).collect();
                self.accum(a, gx);
            }
            Op::Select(a, mask) => {
                let gx = g.iter().zip(&mask).map(|(g, &m)| if m { *g } else { 0.0 }).collect();
                self.accum(a, gx);
            }
            Op::SplitHeads(a, h) => {
                let shape = self.nodes[a.0].value.shape.clone();
                let mut out = vec![0.0; g.len()];
                merge_heads_kernel(g, &mut out, shape[0], shape[1], shape[2], h);
                self.accum(a, out);
            }
            Op::LayerNorm(a, rstd) => {
                let y = &self.nodes[i].value;
                let w = y.last_dim();
                let mut gx = vec![0.0; y.numel()];
                for (((yr, gr), out), r) in y.data.chunks_exact(w).zip(g.chunks_exact(w)).zip(gx.chunks_exact_mut(w)).zip(&rstd) {
                    let mg = gr.iter().sum::<f32>() / w as f32;
                    let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f32>() / w as f32;
                    for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                        *o = r * (g - mg - y * mgy);
                    }
                }
                self.accum(a, gx);
            }
            Op::MergeHeads(a, h) => {
                let out_shape = &self.nodes[i].value.shape;
                let (b, n, c) = (out_shape[0], out_shape[1], out_shape[2]);
                let mut out = vec![0.0; g.len()];
                split_heads_kernel(g, &mut out, b, n, c, h);
                self.accum(a, out);
            }
        }
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product. The left operand may carry leading batch dimensions,
    /// which are flattened: `[.., q] · [q, r] -> [.., r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (q, r) = bv.dims2("matmul")?;
        if av.ndim() < 2 || av.last_dim() != q {
            return Err(Error::dim("matmul", format!("{:?} by {:?}", av.shape, bv.shape)));
        }
        let p = av.numel() / q;
        let mut out = vec![0.0; p * r];
        kernels::matmul_nn(&av.data, &bv.data, &mut out, p, q, r);
        let mut shape = av.shape.clone();
        *shape.last_mut().unwrap() = r;
        let t = Tensor::new(&shape, out)?;
        self.record("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// Batched matrix product over the leading dimension.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a · bᵀ` over the leading dimension.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bad = || Error::dim("bmm", format!("{:?} by {:?} (transposed: {trans_b})", av.shape, bv.shape));
        let (&[batch, p, q], &[bb, b1, b2]) = (&av.shape[..], &bv.shape[..]) else {
            return Err(bad());
        };
        let (bq, r) = if trans_b { (b2, b1) } else { (b1, b2) };
        if batch != bb || q != bq {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * p * r];
        for s in 0..batch {
            let as_ = &av.data[s * p * q..(s + 1) * p * q];
            let bs = &bv.data[s * q * r..(s + 1) * q * r];
            let os = &mut out[s * p * r..(s + 1) * p * r];
            if trans_b {
                kernels::matmul_nt(as_, bs, os, p, q, r);
            } else {
                kernels::matmul_nn(as_, bs, os, p, q, r);
            }
        }
        let t = Tensor::new(&[batch, p, r], out)?;
        self.record("bmm", t, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), name, f)?;
        self.record(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias rows,
    /// positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let k = bv.ndim();
        if k > av.ndim() || av.shape[av.ndim() - k..] != bv.shape[..] {
            return Err(Error::dim("add_broadcast", format!("{:?} + {:?}", av.shape, bv.shape)));
        }
        let n = bv.numel();
        let mut data = av.data.clone();
        for chunk in data.chunks_exact_mut(n) {
            chunk.iter_mut().zip(&bv.data).for_each(|(x, y)| *x += y);
        }
        let t = Tensor::new(&av.shape, data)?;
        self.record("add_broadcast", t, Op::AddBroadcast(a, b), &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let t = self.value(a).map(f);
        self.record(name, t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f32::exp)
    }

    /// Natural log with the input clamped at 1e-12.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), |x| x.max(LOG_CLAMP).ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn soft_threshold(&mut self, a: Var, lambda: f32) -> Result<Var> {
        check_lambda(lambda)?;
        self.unary("soft_threshold", a, Op::SoftThreshold(a, lambda), |x| soft_threshold_scalar(x, lambda))
    }

    pub fn shifted_relu(&mut self, a: Var, lambda: f32) -> Result<Var> {
        check_lambda(lambda)?;
        self.unary("shifted_relu", a, Op::ShiftedRelu(a, lambda), |x| (x - lambda).max(0.0))
    }

    /// Keeps the `k` largest-magnitude entries of each last-dim row.
    pub fn top_k(&mut self, a: Var, k: usize) -> Result<Var> {
        let av = self.value(a);
        let mask = top_k_mask(&av.data, av.last_dim(), k)?;
        let data = av.data.iter().zip(&mask).map(|(&x, &m)| if m { x } else { 0.0 }).collect();
        let t = Tensor::new(&av.shape, data)?;
        self.record("top_k", t, Op::Select(a, mask), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        self.record("transpose", t, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        self.record("reshape", t, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().map(|&x| x as f64).sum::<f64>() as f32;
        self.record("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data.iter().map(|&x| x as f64).sum::<f64>() / v.numel() as f64;
        self.record("mean", Tensor::scalar(s as f32), Op::Mean(a), &[a])
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.ndim() {
            return Err(Error::dim("sum_axis", format!("axis {axis} of {:?}", v.shape)));
        }
        let pre: usize = v.shape[..axis].iter().product();
        let len = v.shape[axis];
        let post: usize = v.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; pre * post];
        for p in 0..pre {
            let dst = &mut out[p * post..(p + 1) * post];
            for k in 0..len {
                let src = &v.data[(p * len + k) * post..(p * len + k + 1) * post];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = v.shape.clone();
        shape.remove(axis);
        let t = if shape.is_empty() { Tensor::scalar(out[0]) } else { Tensor::new(&shape, out)? };
        self.record("sum_axis", t, Op::SumAxis { x: a, axis }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .value(a)
            .shape
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", format!("axis {axis} of {:?}", self.value(a).shape)))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f32)
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if !v.is_finite() {
            return Err(Error::Numeric("softmax input".into()));
        }
        let mut out = vec![0.0; v.numel()];
        kernels::softmax_rows(&v.data, &mut out, v.last_dim());
        let t = Tensor::new(&v.shape, out)?;
        self.record("softmax", t, Op::Softmax(a), &[a])
    }

    /// Normalizes each row of the last dimension to zero mean and unit
    /// variance (`eps` added to the variance).
    pub fn layer_norm(&mut self, a: Var, eps: f32) -> Result<Var> {
        let v = self.value(a);
        let w = v.last_dim();
        let mut out = vec![0.0; v.numel()];
        let mut rstd = Vec::with_capacity(v.numel() / w);
        for (row, o) in v.data.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
            let mean = row.iter().map(|&x| x as f64).sum::<f64>() / w as f64;
            let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / w as f64;
            let r = 1.0 / (var + eps as f64).sqrt();
            for (o, &x) in o.iter_mut().zip(row) {
                *o = ((x as f64 - mean) * r) as f32;
            }
            rstd.push(r as f32);
        }
        let t = Tensor::new(&v.shape, out)?;
        self.record("layer_norm", t, Op::LayerNorm(a, rstd), &[a])
    }

    /// `[B, N, C] -> [B·H, N, C/H]`, head `h` taking columns `h·C/H..(h+1)·C/H`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let v = self.value(a);
        let [b, n, c] = v.shape[..] else {
            return Err(Error::dim("split_heads", format!("expected [B, N, C], got {:?}", v.shape)));
        };
        if heads == 0 || c % heads != 0 {
            return Err(Error::dim("split_heads", format!("{c} channels into {heads} heads")));
        }
        let mut out = vec![0.0; v.numel()];
        split_heads_kernel(&v.data, &mut out, b, n, c, heads);
        let t = Tensor::new(&[b * heads, n, c / heads], out)?;
        self.record("split_heads", t, Op::SplitHeads(a, heads), &[a])
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let v = self.value(a);
        let [bh, n, d] = v.shape[..] else {
            return Err(Error::dim("merge_heads", format!("expected [B*H, N, D], got {:?}", v.shape)));
        };
        if heads == 0 || bh % heads != 0 {
            return Err(Error::dim("merge_heads", format!("{bh} slices into {heads} heads")));
        }
        let (b, c) = (bh / heads, d * heads);
        let mut out = vec![0.0; v.numel()];
        merge_heads_kernel(&v.data, &mut out, b, n, c, heads);
        let t = Tensor::new(&[b, n, c], out)?;
        self.record("merge_heads", t, Op::MergeHeads(a, heads), &[a])
    }
}

pub(crate) const LOG_CLAMP: f32 = 1e-12;

fn check_lambda(lambda: f32) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!("threshold must be a finite nonnegative value, got {lambda}")))
    }
}

pub(crate) fn soft_threshold_scalar(x: f32, lambda: f32) -> f32 {
    let m = x.abs() - lambda;
    if m > 0.0 {
        m.copysign(x)
    } else {
        0.0
    }
}

/// Row-wise top-k mask by magnitude; ties go to the lower column index.
pub(crate) fn top_k_mask(data: &[f32], width: usize, k: usize) -> Result<Vec<bool>> {
    if k == 0 || k > width {
        return Err(Error::contract(format!("top-k needs 1 <= k <= {width}, got {k}")));
    }
    let mut mask = vec![false; data.len()];
    let mut idx: Vec<usize> = Vec::with_capacity(width);
    for (row, mrow) in data.chunks_exact(width).zip(mask.chunks_exact_mut(width)) {
        idx.clear();
        idx.extend(0..width);
        // Stable sort keeps lower indices first among equal magnitudes.
        idx.sort_by(|&i, &j| row[j].abs().total_cmp(&row[i].abs()));
        for &j in &idx[..k] {
            mrow[j] = true;
        }
    }
    Ok(mask)
}

fn split_heads_kernel(x: &[f32], out: &mut [f32], b: usize, n: usize, c: usize, heads: usize) {
    let d = c / heads;
    for bi in 0..b {
        for t in 0..n {
            let src = &x[(bi * n + t) * c..(bi * n + t + 1) * c];
            for h in 0..heads {
                let dst = ((bi * heads + h) * n + t) * d;
                out[dst..dst + d].copy_from_slice(&src[h * d..(h + 1) * d]);
            }
        }
    }
}

fn merge_heads_kernel(x: &[f32], out: &mut [f32], b: usize, n: usize, c: usize, heads: usize) {
    let d = c / heads;
    for bi in 0..b {
        for t in 0..n {
            let dst = &mut out[(bi * n + t) * c..(bi * n + t + 1) * c];
            for h in 0..heads {
                let src = ((bi * heads + h) * n + t) * d;
                dst[h * d..(h + 1) * d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
}
