// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode tape. Every operation appends a node holding its value;
//! [`Tape::backward`] walks the nodes once in reverse recording order.

use crate::error::{CktError, Result};
use crate::nn::params::{Grads, ParamId, ParamStore};
use crate::nn::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `b` is either the same shape as `a` or a single row broadcast over rows.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddN(Vec<Var>),
    Scale(Var, f64),
    OneMinus(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SumAll(Var),
    SumRows(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    /// Softmax probabilities are cached for the backward rule.
    SoftmaxCe(Var, Vec<usize>, Vec<f64>),
    BceLogits(Var, Vec<f64>),
    SquaredError(Var, Vec<f64>),
    GaussianKl(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

/// Gradients of one scalar with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> CktError {
    CktError::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
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

fn accumulate(slot: &mut Option<Vec<f64>>, n: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; n])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// First element of a value; used for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input. No gradient flows past it, but its own gradient
    /// is still reported when `differentiable` is set.
    pub fn leaf(&mut self, t: Tensor, differentiable: bool) -> Var {
        self.push(t, Op::Leaf, differentiable)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// The tape-local copy of a parameter. Repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ta.data[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                for (o, &w) in row.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
        a.shape == b.shape || (b.rows() == 1 && b.cols() == a.cols())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !Self::broadcast_ok(ta, tb) {
            return Err(shape_err("add", ta, tb));
        }
        let c = ta.cols();
        let data = if ta.shape == tb.shape {
            ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect()
        } else {
            ta.data
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.data[i % c])
                .collect()
        };
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("sub", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Sum of equally shaped values.
    pub fn add_n(&mut self, vs: &[Var]) -> Result<Var> {
        let Some(&first) = vs.first() else {
            return Err(CktError::Shape {
                op: "add_n",
                lhs: vec![],
                rhs: vec![],
            });
        };
        let mut t = self.value(first).clone();
        for &v in &vs[1..] {
            let tv = self.value(v);
            if tv.shape != t.shape {
                return Err(shape_err("add_n", &t, tv));
            }
            for (o, x) in t.data.iter_mut().zip(&tv.data) {
                *o += x;
            }
        }
        let rg = vs.iter().any(|&v| self.rg(v));
        Ok(self.push(t, Op::AddN(vs.to_vec()), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * k).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, k), rg)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| 1.0 - x).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::OneMinus(a), rg)
    }

    /// Concatenation along columns; all parts share the row count.
    pub fn concat(&mut self, vs: &[Var]) -> Result<Var> {
        let Some(&first) = vs.first() else {
            return Err(CktError::Shape {
                op: "concat",
                lhs: vec![],
                rhs: vec![],
            });
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &v in vs {
            let t = self.value(v);
            if t.rows() != rows {
                return Err(shape_err("concat", self.value(first), t));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &v in vs {
                let t = self.value(v);
                let c = t.cols();
                data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
            }
        }
        let rg = vs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            Op::ConcatCols(vs.to_vec()),
            rg,
        ))
    }

    /// Stacks values along rows; all parts share the column count.
    pub fn stack_rows(&mut self, vs: &[Var]) -> Result<Var> {
        let Some(&first) = vs.first() else {
            return Err(CktError::Shape {
                op: "stack_rows",
                lhs: vec![],
                rhs: vec![],
            });
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        for &v in vs {
            let t = self.value(v);
            if t.cols() != cols {
                return Err(shape_err("stack_rows", self.value(first), t));
            }
            data.extend_from_slice(&t.data);
        }
        let rows = data.len() / cols.max(1);
        let rg = vs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            Op::ConcatRows(vs.to_vec()),
            rg,
        ))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if start + len > c {
            return Err(CktError::Shape {
                op: "slice_cols",
                lhs: ta.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.data[r * c + start..r * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![rows, len],
                data,
            },
            Op::SliceCols(a, start),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Column sums, giving one row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = vec![0.0; c];
        for (i, x) in ta.data.iter().enumerate() {
            out[i % c] += x;
        }
        let rg = self.rg(a);
        self.push(Tensor::row(out), Op::SumRows(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Summed cross-entropy of row-wise softmax against one class per row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, c) = (t.rows(), t.cols());
        if targets.len() != rows || targets.iter().any(|&k| k >= c) {
            return Err(CktError::Shape {
                op: "softmax_cross_entropy",
                lhs: t.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; rows * c];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &t.data[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for (j, x) in row.iter().enumerate() {
                probs[r * c + j] = (x - m).exp() / z;
            }
            loss += z.ln() + m - row[targets[r]];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe(logits, targets.to_vec(), probs),
            rg,
        ))
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != targets.len() {
            return Err(CktError::Shape {
                op: "bce_with_logits",
                lhs: t.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let loss = t
            .data
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits(logits, targets.to_vec()),
            rg,
        ))
    }

    /// Summed squared difference from constant targets.
    pub fn squared_error(&mut self, a: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(a);
        if t.len() != targets.len() {
            return Err(CktError::Shape {
                op: "squared_error",
                lhs: t.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let loss = t
            .data
            .iter()
            .zip(targets)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SquaredError(a, targets.to_vec()),
            rg,
        ))
    }

    /// KL divergence of N(mu, exp(logvar)) from the standard normal.
    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (tm, tl) = (self.value(mu), self.value(logvar));
        if tm.shape != tl.shape {
            return Err(shape_err("gaussian_kl", tm, tl));
        }
        let kl = -0.5
            * tm.data
                .iter()
                .zip(&tl.data)
                .map(|(m, l)| 1.0 + l - m * m - l.exp())
                .sum::<f64>();
        let rg = self.rg(mu) || self.rg(logvar);
        Ok(self.push(Tensor::scalar(kl), Op::GaussianKl(mu, logvar), rg))
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let n_out = self.nodes[out.0].value.len();
        g[out.0] = Some(vec![1.0; n_out]);
        for i in (0..=out.0).rev() {
            let Some(gi) = g[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &gi, &mut g);
            }
            g[i] = Some(gi);
        }
        Gradients { grads: g }
    }

    fn propagate(&self, node: &Node, gi: &[f64], g: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    let ga = accumulate(&mut g[a.0], m * k);
                    for i in 0..m {
                        let grow = &gi[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if wants(*b) {
                    let gb = accumulate(&mut g[b.0], k * n);
                    for i in 0..m {
                        let grow = &gi[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = ta.data[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    for (o, x) in accumulate(&mut g[a.0], gi.len()).iter_mut().zip(gi) {
                        *o += x;
                    }
                }
                if wants(*b) {
                    let nb = val(*b).len();
                    let gb = accumulate(&mut g[b.0], nb);
                    for (j, x) in gi.iter().enumerate() {
                        gb[j % nb] += x;
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    for (o, x) in accumulate(&mut g[a.0], gi.len()).iter_mut().zip(gi) {
                        *o += x;
                    }
                }
                if wants(*b) {
                    for (o, x) in accumulate(&mut g[b.0], gi.len()).iter_mut().zip(gi) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    let ga = accumulate(&mut g[a.0], gi.len());
                    for j in 0..gi.len() {
                        ga[j] += gi[j] * tb.data[j];
                    }
                }
                if wants(*b) {
                    let gb = accumulate(&mut g[b.0], gi.len());
                    for j in 0..gi.len() {
                        gb[j] += gi[j] * ta.data[j];
                    }
                }
            }
            Op::AddN(vs) => {
                for v in vs {
                    if wants(*v) {
                        for (o, x) in accumulate(&mut g[v.0], gi.len()).iter_mut().zip(gi) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                if wants(*a) {
                    for (o, x) in accumulate(&mut g[a.0], gi.len()).iter_mut().zip(gi) {
                        *o += k * x;
                    }
                }
            }
            Op::OneMinus(a) => {
                if wants(*a) {
                    for (o, x) in accumulate(&mut g[a.0], gi.len()).iter_mut().zip(gi) {
                        *o -= x;
                    }
                }
            }
            Op::ConcatCols(vs) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for v in vs {
                    let c = val(*v).cols();
                    if wants(*v) {
                        let gv = accumulate(&mut g[v.0], rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                gv[r * c + j] += gi[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(vs) => {
                let mut off = 0;
                for v in vs {
                    let n = val(*v).len();
                    if wants(*v) {
                        for (o, x) in accumulate(&mut g[v.0], n).iter_mut().zip(&gi[off..off + n]) {
                            *o += x;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                if wants(*a) {
                    let ta = val(*a);
                    let (rows, c) = (ta.rows(), ta.cols());
                    let len = node.value.cols();
                    let ga = accumulate(&mut g[a.0], rows * c);
                    for r in 0..rows {
                        for j in 0..len {
                            ga[r * c + start + j] += gi[r * len + j];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    let n = val(*a).len();
                    for o in accumulate(&mut g[a.0], n).iter_mut() {
                        *o += gi[0];
                    }
                }
            }
            Op::SumRows(a) => {
                if wants(*a) {
                    let n = val(*a).len();
                    let c = node.value.cols();
                    let ga = accumulate(&mut g[a.0], n);
                    for (j, o) in ga.iter_mut().enumerate() {
                        *o += gi[j % c];
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let ga = accumulate(&mut g[a.0], gi.len());
                    for (j, y) in node.value.data.iter().enumerate() {
                        ga[j] += gi[j] * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let ga = accumulate(&mut g[a.0], gi.len());
                    for (j, y) in node.value.data.iter().enumerate() {
                        ga[j] += gi[j] * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let ta = val(*a);
                    let ga = accumulate(&mut g[a.0], gi.len());
                    for (j, x) in ta.data.iter().enumerate() {
                        if *x > 0.0 {
                            ga[j] += gi[j];
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    let ga = accumulate(&mut g[a.0], gi.len());
                    for (j, y) in node.value.data.iter().enumerate() {
                        ga[j] += gi[j] * y;
                    }
                }
            }
            Op::SoftmaxCe(a, targets, probs) => {
                if wants(*a) {
                    let c = val(*a).cols();
                    let ga = accumulate(&mut g[a.0], probs.len());
                    for (j, p) in probs.iter().enumerate() {
                        let hit = if targets[j / c] == j % c { 1.0 } else { 0.0 };
                        ga[j] += gi[0] * (p - hit);
                    }
                }
            }
            Op::BceLogits(a, targets) => {
                if wants(*a) {
                    let ta = val(*a);
                    let ga = accumulate(&mut g[a.0], targets.len());
                    for (j, y) in targets.iter().enumerate() {
                        ga[j] += gi[0] * (sigmoid(ta.data[j]) - y);
                    }
                }
            }
            Op::SquaredError(a, targets) => {
                if wants(*a) {
                    let ta = val(*a);
                    let ga = accumulate(&mut g[a.0], targets.len());
                    for (j, y) in targets.iter().enumerate() {
                        ga[j] += gi[0] * 2.0 * (ta.data[j] - y);
                    }
                }
            }
            Op::GaussianKl(mu, lv) => {
                let (tm, tl) = (val(*mu), val(*lv));
                if wants(*mu) {
                    let gm = accumulate(&mut g[mu.0], tm.len());
                    for (j, m) in tm.data.iter().enumerate() {
                        gm[j] += gi[0] * m;
                    }
                }
                if wants(*lv) {
                    let gl = accumulate(&mut g[lv.0], tl.len());
                    for (j, l) in tl.data.iter().enumerate() {
                        gl[j] += gi[0] * 0.5 * (l.exp() - 1.0);
                    }
                }
            }
        }
    }

    /// Adds this tape's parameter gradients into `out`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, out: &mut Grads) {
        for (pid, v) in self.params.iter().enumerate() {
            let Some(v) = v else {
                continue;
            };
            if let Some(gv) = grads.get(*v) {
                for (o, x) in out.0[pid].data.iter_mut().zip(gv) {
                    *o += x;
                }
            }
        }
    }
}
