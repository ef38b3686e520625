//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node ids are
//! already a topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;

use super::gemm::{gemm, View};
use super::{axis_split, softmax_in_place, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    OneMinus(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ScaleRows {
        x: NodeId,
        factors: Vec<f64>,
    },
    Sum(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
    CrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    Map {
        x: NodeId,
        name: &'static str,
        deriv: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::OneMinus(_) => "one_minus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Map { name, .. } => name,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// One forward/backward computation. Parameters are bound lazily from the
/// borrowed [`ParamStore`]; each is materialised as a single leaf no matter
/// how many times it is used.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    bound: HashMap<ParamId, NodeId>,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph with no parameter store; only constants and variables.
    pub fn new() -> Self {
        Self {
            params: None,
            bound: HashMap::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let needs = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push(op, value, needs)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Leaf that receives a gradient on `backward`.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.bound.get(&id) {
            return n;
        }
        let store = self.params.expect("graph has no parameter store");
        let n = self.push(Op::Param, store.get(id).clone(), true);
        self.bound.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(Op::MatMul(a, b), value, &[a, b]))
    }

    /// `a * b^T` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            View::row_major(self.value(a).data(), k),
            View::transposed(self.value(b).data(), k),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(Op::MatMulNT(a, b), value, &[a, b]))
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push_op(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_op(Op::Sub(a, b), v, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_op(Op::Mul(a, b), v, &[a, b]))
    }

    /// Adds a length-`C` vector to every row of an `N x C` matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (n, c) = self.value(x).dims2()?;
        if self.value(row).numel() != c {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for (d, &b) in data[i * c..(i + 1) * c].iter_mut().zip(r) {
                *d += b;
            }
        }
        let v = Tensor::new(vec![n, c], data)?;
        Ok(self.push_op(Op::AddRow(x, row), v, &[x, row]))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.value(x).map(|a| a * factor);
        self.push_op(Op::Scale(x, factor), v, &[x])
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| 1.0 - a);
        self.push_op(Op::OneMinus(x), v, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        self.push_op(Op::Sigmoid(x), v, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.push_op(Op::Gelu(x), v, &[x])
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(x).softmax(axis)?;
        Ok(self.push_op(Op::Softmax { x, axis }, v, &[x]))
    }

    /// Row-wise layer normalisation of an `N x C` matrix with population
    /// variance.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (n, c) = self.value(x).dims2()?;
        for p in [gain, bias] {
            if self.value(p).numel() != c {
                return Err(Error::dim("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..c {
                let h = (row[j] - mean) * r;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::new(vec![n, c], out)?;
        Ok(self.push_op(Op::LayerNorm { x, gain, bias, xhat, rstd }, v, &[x, gain, bias]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        if parts.len() == 1 {
            return Ok(first);
        }
        let (_, c) = self.value(first).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let v = Tensor::new(vec![rows, c], data)?;
        Ok(self.push_op(Op::ConcatRows(parts.to_vec()), v, parts))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_cols of nothing"));
        };
        if parts.len() == 1 {
            return Ok(first);
        }
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![r, total], data)?;
        Ok(self.push_op(Op::ConcatCols(parts.to_vec()), v, parts))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::dim("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let v = Tensor::new(vec![len, c], data)?;
        Ok(self.push_op(Op::SliceRows { x, start }, v, &[x]))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: NodeId, factors: &[f64]) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if factors.len() != r {
            return Err(Error::dim("scale_rows", self.shape(x), &[factors.len()]));
        }
        let mut data = self.value(x).data().to_vec();
        for (i, &f) in factors.iter().enumerate() {
            for d in &mut data[i * c..(i + 1) * c] {
                *d *= f;
            }
        }
        let v = Tensor::new(vec![r, c], data)?;
        Ok(self.push_op(
            Op::ScaleRows {
                x,
                factors: factors.to_vec(),
            },
            v,
            &[x],
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push_op(Op::Sum(x), v, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push_op(Op::Mean(x), v, &[x])
    }

    /// Column means of an `N x C` matrix, as `1 x C`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(self.value(x).row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let v = Tensor::new(vec![1, c], out)?;
        Ok(self.push_op(Op::MeanRows(x), v, &[x]))
    }

    /// Softmax cross-entropy of flat `logits` against a class index.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::contract(format!("label {label} out of range for {} classes", z.len())));
        }
        let mut probs = z.to_vec();
        softmax_in_place(&mut probs, 1, z.len(), 1);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let v = Tensor::scalar(lse - z[label]);
        Ok(self.push_op(Op::CrossEntropy { logits, label, probs }, v, &[logits]))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(&mut self, x: NodeId, name: &'static str, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> NodeId {
        let deriv = self.value(x).data().iter().map(|&v| df(v)).collect();
        let v = self.value(x).map(f);
        self.push_op(Op::Map { x, name, deriv }, v, &[x])
    }

    /// First node holding a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.is_finite() {
                return Err(Error::NonFinite {
                    op: n.op.name(),
                    node: i,
                });
            }
        }
        Ok(())
    }

    /// Gradient of `id` after the last `backward`. Leaves that do not
    /// require a gradient report `None`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.bound.get(&id).copied()
    }

    /// Adds every bound parameter's gradient into `into[param.index()]`.
    pub fn accumulate_param_grads(&self, into: &mut [Tensor]) {
        let mut bound: Vec<_> = self.bound.iter().collect();
        bound.sort();
        for (pid, nid) in bound {
            if let Some(g) = self.grads.get(nid.0).and_then(|g| g.as_ref()) {
                for (d, &s) in into[pid.0].data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
    }

    /// Reverse sweep from a single-element node. Earlier gradients are
    /// discarded; contributions along different paths are summed.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar seed, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |id: NodeId| nodes[id.0].needs_grad;
        let value = |id: NodeId| &nodes[id.0].value;
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = value(a).dims2()?;
                let n = value(b).dims2()?.1;
                if needs(a) {
                    let buf = slot(grads, a, value(a));
                    gemm(m, n, k, View::row_major(gd, n), View::transposed(value(b).data(), n), buf, true);
                }
                if needs(b) {
                    let buf = slot(grads, b, value(b));
                    gemm(k, m, n, View::transposed(value(a).data(), k), View::row_major(gd, n), buf, true);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = value(a).dims2()?;
                let n = value(b).dims2()?.0;
                if needs(a) {
                    let buf = slot(grads, a, value(a));
                    gemm(m, n, k, View::row_major(gd, n), View::row_major(value(b).data(), k), buf, true);
                }
                if needs(b) {
                    let buf = slot(grads, b, value(b));
                    gemm(n, m, k, View::transposed(gd, n), View::row_major(value(a).data(), k), buf, true);
                }
            }
            &Op::Add(a, b) => {
                for (id, sign) in [(a, 1.0), (b, 1.0)] {
                    if needs(id) {
                        axpy(slot(grads, id, value(id)), gd, sign);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (id, sign) in [(a, 1.0), (b, -1.0)] {
                    if needs(id) {
                        axpy(slot(grads, id, value(id)), gd, sign);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let other = value(b).data();
                    for ((d, &u), &o) in slot(grads, a, value(a)).iter_mut().zip(gd).zip(other) {
                        *d += u * o;
                    }
                }
                if needs(b) {
                    let other = value(a).data();
                    for ((d, &u), &o) in slot(grads, b, value(b)).iter_mut().zip(gd).zip(other) {
                        *d += u * o;
                    }
                }
            }
            &Op::AddRow(x, row) => {
                if needs(x) {
                    axpy(slot(grads, x, value(x)), gd, 1.0);
                }
                if needs(row) {
                    let c = value(row).numel();
                    let buf = slot(grads, row, value(row));
                    for chunk in gd.chunks_exact(c) {
                        axpy(buf, chunk, 1.0);
                    }
                }
            }
            &Op::Scale(x, f) => {
                if needs(x) {
                    axpy(slot(grads, x, value(x)), gd, f);
                }
            }
            &Op::OneMinus(x) => {
                if needs(x) {
                    axpy(slot(grads, x, value(x)), gd, -1.0);
                }
            }
            &Op::Sigmoid(x) => {
                if needs(x) {
                    let y = nodes[i].value.data();
                    for ((d, &u), &s) in slot(grads, x, value(x)).iter_mut().zip(gd).zip(y) {
                        *d += u * s * (1.0 - s);
                    }
                }
            }
            &Op::Gelu(x) => {
                if needs(x) {
                    let xs = value(x).data();
                    for ((d, &u), &v) in slot(grads, x, value(x)).iter_mut().zip(gd).zip(xs) {
                        *d += u * gelu_deriv(v);
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                if needs(x) {
                    let y = nodes[i].value.data();
                    let (outer, len, inner) = axis_split(value(x).shape(), axis)?;
                    let buf = slot(grads, x, value(x));
                    for o in 0..outer {
                        for q in 0..inner {
                            let base = o * len * inner + q;
                            let dot: f64 = (0..len).map(|j| gd[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let at = base + j * inner;
                                buf[at] += y[at] * (gd[at] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (n, c) = value(*x).dims2()?;
                if needs(*bias) {
                    let buf = slot(grads, *bias, value(*bias));
                    for chunk in gd.chunks_exact(c) {
                        axpy(buf, chunk, 1.0);
                    }
                }
                if needs(*gain) {
                    let buf = slot(grads, *gain, value(*gain));
                    for (k, (&u, &h)) in gd.iter().zip(xhat).enumerate() {
                        buf[k % c] += u * h;
                    }
                }
                if needs(*x) {
                    let gamma = value(*gain).data();
                    let buf = slot(grads, *x, value(*x));
                    let mut dh = vec![0.0; c];
                    for r in 0..n {
                        let row = r * c..(r + 1) * c;
                        for (j, d) in dh.iter_mut().enumerate() {
                            *d = gd[r * c + j] * gamma[j];
                        }
                        let h = &xhat[row.clone()];
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            buf[r * c + j] += rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = value(p).numel();
                    if needs(p) {
                        axpy(slot(grads, p, value(p)), &gd[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.dims2()?.1;
                let mut col = 0;
                for &p in parts {
                    let (r, c) = value(p).dims2()?;
                    if needs(p) {
                        let buf = slot(grads, p, value(p));
                        for row in 0..r {
                            axpy(&mut buf[row * c..(row + 1) * c], &gd[row * total + col..row * total + col + c], 1.0);
                        }
                    }
                    col += c;
                }
            }
            &Op::SliceRows { x, start } => {
                if needs(x) {
                    let c = value(x).dims2()?.1;
                    let buf = slot(grads, x, value(x));
                    axpy(&mut buf[start * c..start * c + gd.len()], gd, 1.0);
                }
            }
            Op::ScaleRows { x, factors } => {
                if needs(*x) {
                    let c = value(*x).dims2()?.1;
                    let buf = slot(grads, *x, value(*x));
                    for (r, &f) in factors.iter().enumerate() {
                        axpy(&mut buf[r * c..(r + 1) * c], &gd[r * c..(r + 1) * c], f);
                    }
                }
            }
            &Op::Sum(x) => {
                if needs(x) {
                    let u = gd[0];
                    slot(grads, x, value(x)).iter_mut().for_each(|d| *d += u);
                }
            }
            &Op::Mean(x) => {
                if needs(x) {
                    let u = gd[0] / value(x).numel() as f64;
                    slot(grads, x, value(x)).iter_mut().for_each(|d| *d += u);
                }
            }
            &Op::MeanRows(x) => {
                if needs(x) {
                    let (r, _) = value(x).dims2()?;
                    let buf = slot(grads, x, value(x));
                    for chunk in buf.chunks_exact_mut(gd.len()) {
                        axpy(chunk, gd, 1.0 / r as f64);
                    }
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                if needs(*logits) {
                    let u = gd[0];
                    let buf = slot(grads, *logits, value(*logits));
                    for (k, (d, &p)) in buf.iter_mut().zip(probs).enumerate() {
                        let target = if k == *label { 1.0 } else { 0.0 };
                        *d += u * (p - target);
                    }
                }
            }
            Op::Map { x, deriv, .. } => {
                if needs(*x) {
                    for ((d, &u), &s) in slot(grads, *x, value(*x)).iter_mut().zip(gd).zip(deriv) {
                        *d += u * s;
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, like: &Tensor) -> &'a mut [f64] {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(like.shape())).data_mut()
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
