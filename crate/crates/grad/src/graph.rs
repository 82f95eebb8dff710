//! Recording graph and backward pass.
//!
//! Nodes are appended in evaluation order, so parents always precede their
//! children and a single reverse sweep visits every node exactly once.

use crate::gemm::gemm;
use crate::{GradError, Result, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    trans_b: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var, MatMulDims),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    SumLast(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-owner differentiation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient for `v`, or zeros of `like`'s shape when nothing flowed back.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.take(v)
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

/// Extents of a broadcast operand: `b` matches `a`, is a trailing suffix of
/// `a`'s shape, or holds a single element.
fn check_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb || b.numel() == 1 {
        return Ok(());
    }
    if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
        return Ok(());
    }
    Err(GradError::shape(op, format!("cannot broadcast {sb:?} onto {sa:?}")))
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let bd = b.data();
    let period = bd.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[i % period]))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

/// Sum a gradient of `a`'s shape down to the broadcast operand's shape.
fn reduce_to(grad: &[f64], b: &Tensor) -> Tensor {
    let period = b.numel();
    let mut out = vec![0.0; period];
    for (i, g) in grad.iter().enumerate() {
        out[i % period] += g;
    }
    Tensor::new(b.shape().to_vec(), out).expect("shape preserved")
}

/// (outer, len, inner) decomposition of a tensor around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_along(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| o * len * inner + l * inner + i;
            let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|l| (src[at(l)] - max).exp()).sum();
            let log_z = z.ln() + max;
            for l in 0..len {
                out[at(l)] = if log {
                    src[at(l)] - log_z
                } else {
                    (src[at(l)] - max).exp() / z
                };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `a [.., k] · b [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a [.., k] · bᵀ` with `b [n, k] -> [.., n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// Batched `a [B, m, k] · b [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    /// Batched `a [B, m, k] · bᵀ` with `b [B, n, k] -> [B, m, n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, batched: bool, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let (dims, out_shape) = if batched {
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
                return Err(GradError::shape("bmm", format!("{sa:?} x {sb:?}")));
            }
            let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
            if sa[2] != kb {
                return Err(GradError::shape("bmm", format!("{sa:?} x {sb:?}")));
            }
            let dims = MatMulDims {
                batch: sa[0],
                m: sa[1],
                k: sa[2],
                n,
                shared_b: false,
                trans_b,
            };
            (dims, vec![sa[0], sa[1], n])
        } else {
            if sb.len() != 2 {
                return Err(GradError::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
            let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
            if av.cols() != kb {
                return Err(GradError::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
            let mut out_shape = sa.to_vec();
            *out_shape.last_mut().expect("rank >= 1") = n;
            let dims = MatMulDims {
                batch: 1,
                m: av.rows(),
                k: kb,
                n,
                shared_b: true,
                trans_b,
            };
            (dims, out_shape)
        };
        let MatMulDims { batch, m, k, n, .. } = dims;
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (av.data(), bv.data());
        for p in 0..batch {
            let bs = if dims.shared_b { 0 } else { p * k * n };
            gemm(
                m,
                k,
                n,
                &ad[p * m * k..(p + 1) * m * k],
                false,
                &bd[bs..bs + k * n],
                trans_b,
                &mut out[p * m * n..(p + 1) * m * n],
                false,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b, dims), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_broadcast("add", av, bv)?;
        let value = broadcast_zip(av, bv, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_broadcast("sub", av, bv)?;
        let value = broadcast_zip(av, bv, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_broadcast("mul", av, bv)?;
        let value = broadcast_zip(av, bv, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    /// Concatenate along the last axis; all inputs share their leading extents.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| GradError::shape("concat", "no inputs"))?;
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len() - 1].to_vec()
        };
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != *lead {
                return Err(GradError::shape(
                    "concat",
                    format!("leading extents {:?} vs {lead:?}", &s[..s.len() - 1]),
                ));
            }
            total += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), needs))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let needs = self.needs(a);
        self.push(value, Op::Tanh(a), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let needs = self.needs(a);
        self.push(value, Op::Exp(a), needs)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let needs = self.needs(a);
        self.push(value, Op::Log(a), needs)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(GradError::InvalidAxis {
                axis,
                rank: av.rank(),
            });
        }
        let value = softmax_along(av, axis, false);
        let needs = self.needs(a);
        Ok(self.push(value, Op::Softmax(a, axis), needs))
    }

    /// Numerically stable `log(softmax(a))`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(GradError::InvalidAxis {
                axis,
                rank: av.rank(),
            });
        }
        let value = softmax_along(av, axis, true);
        let needs = self.needs(a);
        Ok(self.push(value, Op::LogSoftmax(a, axis), needs))
    }

    /// Sum over the last axis: `[.., c] -> [..]` (`[1]` for vectors).
    pub fn sum_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let shape = if av.rank() == 1 {
            vec![1]
        } else {
            av.shape()[..av.rank() - 1].to_vec()
        };
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let value = Tensor::new(shape, data).expect("shape preserved");
        let needs = self.needs(a);
        self.push(value, Op::SumLast(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push(value, Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::scalar(av.sum() / av.numel() as f64);
        let needs = self.needs(a);
        self.push(value, Op::Mean(a), needs)
    }

    /// Pick one entry of each row: `[R.., c]` with `R` indices -> `[R]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if indices.len() != av.rows() {
            return Err(GradError::shape(
                "gather",
                format!("{} indices for {} rows", indices.len(), av.rows()),
            ));
        }
        let cols = av.cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(GradError::LabelOutOfRange {
                label: bad,
                classes: cols,
            });
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| av.row(r)[i])
            .collect();
        let value = Tensor::new([indices.len()], data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Gather(a, indices.to_vec()), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Mean cross-entropy of row-wise logits `[B, k]` against integer labels.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let cols = self.value(logits).cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(GradError::LabelOutOfRange {
                label: bad,
                classes: cols,
            });
        }
        let axis = self.value(logits).rank() - 1;
        let logp = self.log_softmax(logits, axis)?;
        let picked = self.gather(logp, labels)?;
        let mean = self.mean(picked);
        Ok(self.scale(mean, -1.0))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(GradError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b, dims) => {
                let MatMulDims {
                    batch,
                    m,
                    k,
                    n,
                    shared_b,
                    trans_b,
                } = *dims;
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = vec![0.0; av.numel()];
                    for p in 0..batch {
                        let bs = if shared_b { 0 } else { p * k * n };
                        // dA = dC · op(B)ᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &gd[p * m * n..(p + 1) * m * n],
                            false,
                            &bv.data()[bs..bs + k * n],
                            !trans_b,
                            &mut da[p * m * k..(p + 1) * m * k],
                            false,
                        );
                    }
                    let da = Tensor::new(av.shape().to_vec(), da).expect("shape preserved");
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bv.numel()];
                    for p in 0..batch {
                        let bs = if shared_b { 0 } else { p * k * n };
                        let a_blk = &av.data()[p * m * k..(p + 1) * m * k];
                        let g_blk = &gd[p * m * n..(p + 1) * m * n];
                        let dst = &mut db[bs..bs + k * n];
                        if trans_b {
                            // dB (n×k) = dCᵀ · A
                            gemm(n, m, k, g_blk, true, a_blk, false, dst, shared_b);
                        } else {
                            // dB (k×n) = Aᵀ · dC
                            gemm(k, m, n, a_blk, true, g_blk, false, dst, shared_b);
                        }
                    }
                    let db = Tensor::new(bv.shape().to_vec(), db).expect("shape preserved");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let mut db = reduce_to(gd, self.value(*b));
                    if matches!(node.op, Op::Sub(..)) {
                        db.data_mut().iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = broadcast_zip(g, bv, |x, y| x * y);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let prod: Vec<f64> = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, reduce_to(&prod, bv));
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.map(|x| c * x));
            }
            Op::Concat(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(pv.numel());
                        for r in 0..rows {
                            let base = r * total + offset;
                            dp.extend_from_slice(&gd[base..base + w]);
                        }
                        let dp = Tensor::new(pv.shape().to_vec(), dp).expect("shape preserved");
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Tanh(a) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * len * inner + l * inner + i;
                        if log {
                            // dx = dy - softmax · Σ dy
                            let s: f64 = (0..len).map(|l| gd[at(l)]).sum();
                            for l in 0..len {
                                d[at(l)] = gd[at(l)] - y[at(l)].exp() * s;
                            }
                        } else {
                            // dx = y ⊙ (dy - Σ dy·y)
                            let s: f64 = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                d[at(l)] = y[at(l)] * (gd[at(l)] - s);
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::SumLast(a) => {
                let av = self.value(*a);
                let c = av.cols();
                let d = (0..av.numel()).map(|i| gd[i / c]).collect();
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
            }
            Op::Sum(a) | Op::Mean(a) => {
                let av = self.value(*a);
                let scale = if matches!(node.op, Op::Mean(_)) {
                    1.0 / av.numel() as f64
                } else {
                    1.0
                };
                let d = Tensor::full(av.shape().to_vec(), gd[0] * scale);
                self.accumulate(grads, *a, d);
            }
            Op::Gather(a, idx) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut d = vec![0.0; av.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    d[r * c + i] += gd[r];
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(shape).unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_has_derivative_two_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_two_leaves() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let y = g.param(Tensor::scalar(-2.0));
        let z = g.add(x, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
        assert_eq!(grads.get(y).unwrap().item(), 1.0);
    }

    #[test]
    fn reuse_accumulates() {
        // f = x + x  versus  f = 2x
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[0.1, -0.4, 2.0]));
        let twice = g.add(x, x).unwrap();
        let s = g.sum(twice);
        let d2 = g.backward(s).unwrap().get(x).unwrap().clone();

        let mut g1 = Graph::new();
        let x1 = g1.param(t(&[3], &[0.1, -0.4, 2.0]));
        let s1 = g1.sum(x1);
        let d1 = g1.backward(s1).unwrap().get(x1).unwrap().clone();
        for (a, b) in d2.data().iter().zip(d1.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(GradError::NonScalarRoot(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let sa = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(sa).data(), &[0.5, 0.5]);

        let b = g.constant(t(&[2], &[1.0, 0.0]));
        let sb = g.softmax(b, 0).unwrap();
        // e / (e + 1), computed by hand: 2.718281828 / 3.718281828
        let want = [0.731_058_578_6, 0.268_941_421_4];
        for (x, y) in g.value(sb).data().iter().zip(want) {
            assert!((x - y).abs() < 1e-9);
        }

        let c = g.constant(t(&[3], &[5.0, 5.0, 5.0]));
        let sc = g.softmax(c, 0).unwrap();
        for v in g.value(sc).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(
            g.softmax(c, 1),
            Err(GradError::InvalidAxis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let s = g.softmax(a, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.731_058_578_6).abs() < 1e-9);
        assert!((v[1] - 0.5).abs() < 1e-12);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_log_k() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros([3, 4]));
        let ce = g.cross_entropy_logits(logits, &[0, 1, 3]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            g.cross_entropy_logits(logits, &[0, 4, 1]),
            Err(GradError::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut g = Graph::new();
            let logits = g.constant(t(&[1, 3], &[0.0, margin, 0.0]));
            let ce = g.cross_entropy_logits(logits, &[1]).unwrap();
            let v = g.value(ce).item();
            assert!(v >= 0.0 && v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_scalar_formula() {
        let vals: Vec<f64> = (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let labels = [2, 0, 4];
        let mut g = Graph::new();
        let logits = g.constant(t(&[3, 5], &vals));
        let ce = g.cross_entropy_logits(logits, &labels).unwrap();
        let mut want = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &vals[r * 5..r * 5 + 5];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            want += -(row[l].exp() / z).ln();
        }
        want /= 3.0;
        assert!((g.value(ce).item() - want).abs() < 1e-12);
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([4, 3]));
        let b = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.add(x, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0, 4.0]);
        let bad = g.constant(Tensor::zeros([2]));
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(c, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }
}
