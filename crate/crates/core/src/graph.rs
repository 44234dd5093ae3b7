//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! execution order, so the node list is always topologically sorted and the
//! backward sweep is a single reverse pass. Gradients are returned only for
//! nodes created with [`Graph::param`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{axis_split, dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    AddScalar(NodeId),
    AddRow(NodeId, NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Embedding(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    Clamp(NodeId, f32, f32),
    Conv2dSame {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    Patchify(NodeId, usize),
    PlacePatch {
        x: NodeId,
        row: usize,
        col: usize,
    },
    NormalizeRows(NodeId, Vec<f32>),
    Bce {
        probs: NodeId,
        targets: Tensor,
        weights: Tensor,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            Transpose(x)
            | Scale(x, _)
            | AddScalar(x)
            | Sigmoid(x)
            | Relu(x)
            | Softmax(x, _)
            | Embedding(x, _)
            | Sum(x)
            | Mean(x)
            | SumAxis(x, _)
            | Clamp(x, _, _)
            | Patchify(x, _)
            | NormalizeRows(x, _) => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat(xs, _) => xs.clone(),
            Slice { x, .. } | PlacePatch { x, .. } => vec![*x],
            Conv2dSame { x, kernel, bias } => vec![*x, *kernel, *bias],
            Bce { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    marked: bool,
}

/// Gradients of a scalar loss with respect to every marked node.
#[derive(Debug, Default)]
pub struct Gradients(BTreeMap<NodeId, Tensor>);

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.0.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.0.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Default)]
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

    /// A leaf whose gradient is not requested.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
            marked: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is returned by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
            marked: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            marked: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::transpose(self.value(x))?;
        Ok(self.push(Op::Transpose(x), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> NodeId {
        let v = self.value(x).map(|e| e * factor);
        self.push(Op::Scale(x, factor), v)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        let v = self.value(x).map(|e| e + c);
        self.push(Op::AddScalar(x), v)
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let v = ops::add_row(self.value(x), self.value(row))?;
        Ok(self.push(Op::AddRow(x, row), v))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = ops::sigmoid(self.value(x));
        self.push(Op::Sigmoid(x), v)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = ops::relu(self.value(x));
        self.push(Op::Relu(x), v)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = ops::softmax(self.value(x), axis)?;
        Ok(self.push(Op::Softmax(x, axis), v))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap_or(&1);
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(Error::shape("layer_norm", xv.shape(), self.value(gamma).shape()));
        }
        let stats = ops::layer_norm_stats(xv);
        let v = ops::layer_norm_apply(xv, &stats.xhat, self.value(gamma), self.value(beta));
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: stats.xhat,
                inv_std: stats.inv_std,
            },
            v,
        ))
    }

    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = ops::embedding(self.value(table), indices)?;
        Ok(self.push(Op::Embedding(table, indices.to_vec()), v))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat(&values, axis)?;
        Ok(self.push(Op::Concat(parts.to_vec(), axis), v))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = ops::slice(self.value(x), axis, start, len)?;
        Ok(self.push(Op::Slice { x, axis, start }, v))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / xv.numel() as f32);
        self.push(Op::Mean(x), v)
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = ops::sum_axis(self.value(x), axis)?;
        Ok(self.push(Op::SumAxis(x, axis), v))
    }

    /// Elementwise clamp; the gradient passes where `lo ≤ x ≤ hi`.
    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> NodeId {
        let v = ops::clamp(self.value(x), lo, hi);
        self.push(Op::Clamp(x, lo, hi), v)
    }

    pub fn conv2d_same(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::conv2d_same(self.value(x), self.value(kernel), self.value(bias))?;
        Ok(self.push(Op::Conv2dSame { x, kernel, bias }, v))
    }

    pub fn patchify(&mut self, x: NodeId, patch: usize) -> Result<NodeId> {
        let v = ops::patchify(self.value(x), patch)?;
        Ok(self.push(Op::Patchify(x, patch), v))
    }

    pub fn place_patch(&mut self, x: NodeId, height: usize, width: usize, row: usize, col: usize) -> Result<NodeId> {
        let v = ops::place_patch(self.value(x), height, width, row, col)?;
        Ok(self.push(Op::PlacePatch { x, row, col }, v))
    }

    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::normalize_rows(self.value(x))?;
        let norms = ops::row_norms(self.value(x));
        Ok(self.push(Op::NormalizeRows(x, norms), v))
    }

    /// Weighted binary cross-entropy, summed over the last axis and averaged
    /// over the leading rows. `probs` must lie strictly inside (0, 1).
    pub fn bce(&mut self, probs: NodeId, targets: &Tensor, weights: &Tensor) -> Result<NodeId> {
        let p = self.value(probs);
        if p.shape() != targets.shape() {
            return Err(Error::shape("bce", p.shape(), targets.shape()));
        }
        let n = *p.shape().last().unwrap_or(&1);
        if weights.shape() != [n] {
            return Err(Error::shape("bce", p.shape(), weights.shape()));
        }
        let v = Tensor::scalar(crate::losses::bce_value(p.data(), targets.data(), weights.data()));
        Ok(self.push(
            Op::Bce {
                probs,
                targets: targets.clone(),
                weights: weights.clone(),
            },
            v,
        ))
    }

    /// Reverse sweep from a scalar `loss` node.
    ///
    /// Fan-out contributions are summed as the sweep visits consumers in
    /// descending node order, so repeated calls are bit-identical.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if node.marked {
                out.0.insert(NodeId(id), g);
            }
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |id: NodeId, t: Tensor| accumulate(grads, id, t);
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if self.wants(*a) {
                    let da = ops::matmul_nt_raw(gd, bv.data(), m, n, k);
                    acc(*a, Tensor::new(&[m, k], da)?);
                }
                if self.wants(*b) {
                    let db = ops::matmul_tn_raw(av.data(), gd, m, k, n);
                    acc(*b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Transpose(x) => acc(*x, ops::transpose(g)?),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, ops::mul(g, self.value(*b))?);
                }
                if self.wants(*b) {
                    acc(*b, ops::mul(g, self.value(*a))?);
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    acc(*x, g.clone());
                }
                if self.wants(*row) {
                    acc(*row, ops::sum_axis(g, 0)?);
                }
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                acc(*x, dx);
            }
            Op::Relu(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                acc(*x, dx);
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis)?;
                let yd = y.data();
                let mut dx = vec![0.0f32; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = 0.0f32;
                        for k in 0..len {
                            s += gd[base + k * inner] * yd[base + k * inner];
                        }
                        for k in 0..len {
                            let ix = base + k * inner;
                            dx[ix] = yd[ix] * (gd[ix] - s);
                        }
                    }
                }
                acc(*x, Tensor::new(y.shape(), dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let n = gam.len();
                let rows = gd.len() / n;
                if self.wants(*beta) {
                    acc(*beta, ops::sum_axis(&g.reshape(&[rows, n])?, 0)?);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0f32; n];
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += gd[r * n + j] * xhat[r * n + j];
                        }
                    }
                    acc(*gamma, Tensor::vector(dg));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0f32; gd.len()];
                    let nf = n as f32;
                    for r in 0..rows {
                        let sl = r * n..(r + 1) * n;
                        let xh = &xhat[sl.clone()];
                        let dxh: Vec<f32> = gd[sl.clone()].iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_d: f32 = dxh.iter().sum();
                        let sum_dx: f32 = dot(&dxh, xh);
                        for j in 0..n {
                            dx[r * n + j] = inv_std[r] / nf * (nf * dxh[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                    acc(*x, Tensor::new(g.shape(), dx)?);
                }
            }
            Op::Embedding(table, indices) => {
                let tv = self.value(*table);
                let (_, d) = tv.dims2()?;
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt.data_mut()[ix * d + j] += gd[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    if self.wants(p) {
                        acc(p, ops::slice(g, *axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let (outer, alen, inner) = axis_split(xv.shape(), *axis)?;
                let len = g.shape()[*axis];
                let mut dx = vec![0.0f32; xv.numel()];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, Tensor::new(xv.shape(), dx)?);
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.value(*x).shape(), gd[0])),
            Op::Mean(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::full(xv.shape(), gd[0] / xv.numel() as f32));
            }
            Op::SumAxis(x, axis) => {
                let xv = self.value(*x);
                let (outer, len, inner) = axis_split(xv.shape(), *axis)?;
                let mut dx = vec![0.0f32; xv.numel()];
                for o in 0..outer {
                    for k in 0..len {
                        let dst = (o * len + k) * inner;
                        dx[dst..dst + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, Tensor::new(xv.shape(), dx)?);
            }
            Op::Clamp(x, lo, hi) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 })?;
                acc(*x, dx);
            }
            Op::Conv2dSame { x, kernel, bias } => {
                let (dx, dk, db) = conv2d_backward(self.value(*x), self.value(*kernel), g)?;
                if self.wants(*x) {
                    acc(*x, dx);
                }
                if self.wants(*kernel) {
                    acc(*kernel, dk);
                }
                if self.wants(*bias) {
                    acc(*bias, db);
                }
            }
            Op::Patchify(x, patch) => {
                let xv = self.value(*x);
                let (c, h, w) = xv.dims3()?;
                let feat = c * patch * patch;
                let mut dx = vec![0.0f32; xv.numel()];
                ops::patch_index_map(c, h, w, *patch, |t, f, src| dx[src] = gd[t * feat + f]);
                acc(*x, Tensor::new(xv.shape(), dx)?);
            }
            Op::PlacePatch { x, row, col } => {
                let (c, h, w) = self.value(*x).dims3()?;
                let (_, height, width) = g.dims3()?;
                let mut dx = vec![0.0f32; c * h * w];
                for ci in 0..c {
                    for y in 0..h {
                        let src = (ci * height + row + y) * width + col;
                        dx[(ci * h + y) * w..(ci * h + y + 1) * w].copy_from_slice(&gd[src..src + w]);
                    }
                }
                acc(*x, Tensor::new(&[c, h, w], dx)?);
            }
            Op::NormalizeRows(x, norms) => {
                let y = &node.value;
                let (m, n) = y.dims2()?;
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let yr = y.row(i);
                    let gr = &gd[i * n..(i + 1) * n];
                    let proj = dot(yr, gr);
                    for j in 0..n {
                        dx[i * n + j] = (gr[j] - yr[j] * proj) / norms[i];
                    }
                }
                acc(*x, Tensor::new(&[m, n], dx)?);
            }
            Op::Bce {
                probs,
                targets,
                weights,
            } => {
                let pv = self.value(*probs);
                let n = weights.numel();
                let rows = (pv.numel() / n) as f32;
                let w = weights.data();
                let dx = Tensor::from_fn(pv.shape(), |i| {
                    let p = pv.data()[i];
                    let y = targets.data()[i];
                    -gd[0] * w[i % n] * (y / p - (1.0 - y) / (1.0 - p)) / rows
                });
                acc(*probs, dx);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, t: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

fn conv2d_backward(x: &Tensor, kernel: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w) = x.dims3()?;
    let ks = kernel.shape();
    let (co, k) = (ks[0], ks[2]);
    let r = (k / 2) as isize;
    let xd = x.data();
    let kd = kernel.data();
    let gd = g.data();
    let mut dx = vec![0.0f32; c * h * w];
    let mut dk = vec![0.0f32; kernel.numel()];
    let mut db = vec![0.0f32; co];
    for o in 0..co {
        let gplane = &gd[o * h * w..(o + 1) * h * w];
        db[o] = gplane.iter().sum();
        for ci in 0..c {
            for dy in 0..k {
                for dxk in 0..k {
                    let kix = ((o * c + ci) * k + dy) * k + dxk;
                    let kv = kd[kix];
                    let oy = dy as isize - r;
                    let ox = dxk as isize - r;
                    let (x0, x1) = ops::valid_range(w, ox);
                    let mut kacc = 0.0f32;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = (ci * h + sy as usize) * w;
                        let grow = &gplane[y * w..(y + 1) * w];
                        for xx in x0..x1 {
                            let sx = (xx as isize + ox) as usize;
                            kacc += grow[xx] * xd[srow + sx];
                            dx[srow + sx] += kv * grow[xx];
                        }
                    }
                    dk[kix] += kacc;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(kernel.shape(), dk)?,
        Tensor::vector(db),
    ))
}
