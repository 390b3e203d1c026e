use std::borrow::Cow;
use std::collections::HashMap;

use super::{normal_cdf, Param, ParamId, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A contiguous run of rows forming one causal sequence in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation graph. Nodes are appended in evaluation order, so
/// insertion order is a valid topological order and `backward` simply walks
/// it in reverse.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Result of a backward pass: per-node and per-parameter gradients.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(|g| g.as_slice())
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input whose gradient can be read back via
    /// [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a parameter by reference. Frozen parameters become constants.
    pub fn param(&mut self, p: &'a Param) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(p.value()),
            op: Op::Param(p.id()),
            requires_grad: p.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = matmul_values(ta, tb)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::shape("transpose", t.shape(), &[0, 0]));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x + b` with `b` broadcast along every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.numel() != tx.cols() {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let bias = tb.data();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(bias.len()) {
            for (o, bi) in row.iter_mut().zip(bias) {
                *o += bi;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// `scale * x + shift` for constants.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let out = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    /// `x * s` for a single-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(Error::shape("mul_scalar", ts.shape(), &[1]));
        }
        let c = ts.item();
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::MulScalar(x, s), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::exp);
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Exact GeLU, `x Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v * normal_cdf(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (g, b) = (tg.data(), tb.data());
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Row-wise L2 normalisation. Zero rows stay zero and pass no gradient.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n > 0.0 {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
        }
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Gathers rows of `x` (repeats allowed). Embedding lookup is this op
    /// applied to a token table.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = (t.rows(), t.cols());
        if idx.is_empty() {
            return Err(Error::contract("select_rows needs at least one index"));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    what: "rows",
                    index: i,
                    size: rows,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows needs at least one part"))?;
        let c = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != c {
                return Err(Error::shape("concat_rows", &[rows, c], t.shape()));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, c], out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Multi-head causal self-attention over packed sequences. Each segment
    /// attends only within itself and only to earlier-or-equal positions.
    /// Rows not covered by any segment produce zeros.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[Segment]) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.shape().len() != 2 {
            return Err(Error::shape("causal_attention", tq.shape(), tk.shape()));
        }
        let (n, d) = (tq.shape()[0], tq.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("{d} not divisible into {heads} heads")));
        }
        for s in segments {
            if s.start + s.len > n || s.len == 0 {
                return Err(Error::Index {
                    what: "attention rows",
                    index: s.start + s.len,
                    size: n,
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let total: usize = segments.iter().map(|s| s.len * s.len * heads).sum();
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; n * d];
        let mut off = 0;
        let mut row = Vec::new();
        for s in segments {
            let l = s.len;
            for h in 0..heads {
                let hoff = h * dh;
                for i in 0..l {
                    let qi = &qd[(s.start + i) * d + hoff..(s.start + i) * d + hoff + dh];
                    row.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kd[(s.start + j) * d + hoff..(s.start + j) * d + hoff + dh];
                        let sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(sc);
                        row.push(sc);
                    }
                    let mut z = 0.0;
                    for sc in row.iter_mut() {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let p = &mut probs[off + i * l..off + i * l + l];
                    let o = &mut out[(s.start + i) * d + hoff..(s.start + i) * d + hoff + dh];
                    for j in 0..=i {
                        let pij = row[j] / z;
                        p[j] = pij;
                        let vj = &vd[(s.start + j) * d + hoff..(s.start + j) * d + hoff + dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += pij * vv;
                        }
                    }
                }
                off += l * l;
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean token cross-entropy of `logits: n×V` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, vocab) = (t.rows(), t.cols());
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= vocab) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                size: vocab,
            });
        }
        let probs = t.softmax_rows().into_data();
        let mut loss = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= n as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params: HashMap<ParamId, Vec<f64>> = HashMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                match params.get_mut(id) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        params.insert(*id, g.clone());
                    }
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    let ga = self.grad_buf(grads, *a);
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, n, 1, tb.data(), 1, n, ga, 1.0);
                }
                if self.requires_grad(*b) {
                    let gb = self.grad_buf(grads, *b);
                    // dB = Aᵀ · dC
                    gemm(k, m, n, ta.data(), 1, k, g, n, 1, gb, 1.0);
                }
            }
            Op::Transpose(a) => {
                if self.requires_grad(*a) {
                    let s = self.value(*a).shape();
                    let (m, n) = (s[0], s[1]);
                    let ga = self.grad_buf(grads, *a);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_scaled(grads, *a, g, 1.0);
                self.acc_scaled(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_scaled(grads, *a, g, 1.0);
                self.acc_scaled(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let ga = self.grad_buf(grads, *a);
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(db) {
                        *o += gi * bi;
                    }
                }
                if self.requires_grad(*b) {
                    let gb = self.grad_buf(grads, *b);
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(da) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddBias(x, b) => {
                self.acc_scaled(grads, *x, g, 1.0);
                if self.requires_grad(*b) {
                    let gb = self.grad_buf(grads, *b);
                    let c = gb.len();
                    for row in g.chunks(c) {
                        for (o, gi) in gb.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Affine(x, scale) => self.acc_scaled(grads, *x, g, *scale),
            Op::MulScalar(x, s) => {
                let c = self.value(*s).item();
                self.acc_scaled(grads, *x, g, c);
                if self.requires_grad(*s) {
                    let dx = self.value(*x).data();
                    let total: f64 = g.iter().zip(dx).map(|(a, b)| a * b).sum();
                    self.grad_buf(grads, *s)[0] += total;
                }
            }
            Op::Exp(x) => self.acc_with(grads, *x, |i| g[i] * y[i]),
            Op::Sigmoid(x) => self.acc_with(grads, *x, |i| g[i] * y[i] * (1.0 - y[i])),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                self.acc_with(grads, *x, |i| {
                    let v = xv[i];
                    let pdf = inv_sqrt_2pi * (-0.5 * v * v).exp();
                    g[i] * (normal_cdf(v) + v * pdf)
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                if self.requires_grad(*gain) {
                    let gg = self.grad_buf(grads, *gain);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let gb = self.grad_buf(grads, *bias);
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += grow[j];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gx = self.grad_buf(grads, *x);
                    let mut dxhat = vec![0.0; d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hrow[j];
                        }
                        let df = d as f64;
                        for j in 0..d {
                            gx[r * d + j] += is / df * (df * dxhat[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
            }
            Op::Sum(x) => self.acc_with(grads, *x, |_| g[0]),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.acc_with(grads, *x, |_| g[0] / n)
            }
            Op::L2NormalizeRows { x, norms } => {
                if self.requires_grad(*x) {
                    let c = self.value(*x).cols();
                    let gx = self.grad_buf(grads, *x);
                    for (r, &n) in norms.iter().enumerate() {
                        if n == 0.0 {
                            continue;
                        }
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * proj) / n;
                        }
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                if self.requires_grad(*x) {
                    let c = self.value(*x).cols();
                    let gx = self.grad_buf(grads, *x);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    self.acc_scaled(grads, *p, &g[off..off + n], 1.0);
                    off += n;
                }
            }
            Op::Reshape(x) => self.acc_scaled(grads, *x, g, 1.0),
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, segments, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.requires_grad(*logits) {
                    let vocab = self.value(*logits).cols();
                    let n = targets.len() as f64;
                    let scale = g[0] / n;
                    let gl = self.grad_buf(grads, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..vocab {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * vocab + j] += scale * (probs[r * vocab + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (tq.shape()[0], tq.shape()[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut gq = vec![0.0; n * d];
        let mut gk = vec![0.0; n * d];
        let mut gv = vec![0.0; n * d];
        let mut dp = Vec::new();
        let mut off = 0;
        for s in segments {
            let l = s.len;
            for h in 0..heads {
                let hoff = h * dh;
                let at = |r: usize| (s.start + r) * d + hoff;
                for i in 0..l {
                    let p = &probs[off + i * l..off + i * l + l];
                    let gi = &g[at(i)..at(i) + dh];
                    dp.clear();
                    let mut pdp = 0.0;
                    for j in 0..=i {
                        let vj = &vd[at(j)..at(j) + dh];
                        let x = gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                        pdp += p[j] * x;
                        dp.push(x);
                        let gvj = &mut gv[at(j)..at(j) + dh];
                        for (o, gg) in gvj.iter_mut().zip(gi) {
                            *o += p[j] * gg;
                        }
                    }
                    let qi_start = at(i);
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - pdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = at(j);
                        for c in 0..dh {
                            gq[qi_start + c] += ds * kd[kj + c];
                            gk[kj + c] += ds * qd[qi_start + c];
                        }
                    }
                }
                off += l * l;
            }
        }
        self.acc_scaled(grads, q, &gq, 1.0);
        self.acc_scaled(grads, k, &gk, 1.0);
        self.acc_scaled(grads, v, &gv, 1.0);
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn acc_scaled(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], c: f64) {
        if !self.requires_grad(v) {
            return;
        }
        let buf = self.grad_buf(grads, v);
        for (o, gi) in buf.iter_mut().zip(g) {
            *o += c * gi;
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.requires_grad(v) {
            return;
        }
        let buf = self.grad_buf(grads, v);
        for (i, o) in buf.iter_mut().enumerate() {
            *o += f(i);
        }
    }
}

/// `C = A·B + beta·C` for row-major operands described by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and extents describe in-bounds views of the slices
    // (asserted by the callers' shape checks); `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), k, 1, b.data(), n, 1, &mut out, 0.0);
    Tensor::new(vec![m, n], out)
}
