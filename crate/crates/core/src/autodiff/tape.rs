//! Define-by-run reverse-mode tape.
//!
//! Every forward operation appends a node holding its value and the ids of
//! its inputs. `backward` walks the nodes in reverse, propagating adjoints
//! only into nodes that (transitively) depend on a trainable leaf, and
//! accumulates the result on the trainable leaves.

use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleRows(Var, Vec<f64>),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    SliceRows(Var, usize),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Reparameterize(Var, Var, Arc<Tensor>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand is a single row repeated over the leading axis.
    Rows,
}

/// Computation tape. One tape per forward pass; not shared across threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    /// Values cut off by [`Tape::detach`], in call order.
    detached: Vec<Arc<Tensor>>,
    /// Replacement values for successive `detach` calls.
    pinned: Option<Vec<Arc<Tensor>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `k`-th `detach` returns `pinned[k]` instead of the
    /// current value. Replaying the detached values of a reference pass
    /// makes finite differences see the same stop-gradient semantics as
    /// the reverse sweep.
    pub fn with_pinned_detach(pinned: Vec<Arc<Tensor>>) -> Self {
        Self {
            pinned: Some(pinned),
            ..Self::default()
        }
    }

    /// Values cut off by `detach` so far, in call order.
    pub fn detached_values(&self) -> &[Arc<Tensor>] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad, false)
    }

    fn push_shared(
        &mut self,
        value: Arc<Tensor>,
        op: Op,
        requires_grad: bool,
        trainable: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is collected by `backward`.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn leaf(&mut self, value: Arc<Tensor>, trainable: bool) -> Var {
        self.push_shared(value, Op::Leaf, trainable, trainable)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let k = self.detached.len();
        let value = match &self.pinned {
            Some(pinned) if k < pinned.len() => {
                debug_assert_eq!(pinned[k].shape(), self.nodes[v.0].value.shape());
                Arc::clone(&pinned[k])
            }
            _ => Arc::clone(&self.nodes[v.0].value),
        };
        self.detached.push(Arc::clone(&value));
        self.leaf(value, false)
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

    /// Accumulated gradient of a trainable leaf, `None` if it never received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        let row_like = match sb {
            [n] => sa.len() == 2 && sa[1] == *n,
            [1, n] => sa.len() == 2 && sa[1] == *n,
            _ => false,
        };
        if row_like {
            Ok(Broadcast::Rows)
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let kind = self.broadcast(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = tb.numel();
        let data: Vec<f64> = match kind {
            Broadcast::Same => ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Broadcast::Rows => ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % n]))
                .collect(),
        };
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum; `b` may be a single row broadcast over the batch axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "minimum",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// Multiplies row `i` of a matrix by `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.rows() != factors.len() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let cols = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * factors[i / cols])
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::ScaleRows(a, factors.to_vec()), rg))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat needs at least one input".into()))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Concatenation of matrices along the leading (row) axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack_rows needs at least one input".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::StackRows(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || start + len > t.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let cols = t.cols();
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![len, cols], data)?,
            Op::SliceRows(a, start),
            rg,
        ))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).is_finite() {
            return Err(Error::Domain {
                op: "softplus",
                detail: "non-finite input".into(),
            });
        }
        Ok(self.unary(a, softplus, Op::Softplus(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, f64::exp, Op::Exp(a));
        if !self.value(v).is_finite() {
            return Err(Error::Domain {
                op: "exp",
                detail: "overflow".into(),
            });
        }
        Ok(v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self
            .value(a)
            .data()
            .iter()
            .find(|&&x| !(x > 0.0 && x.is_finite()))
        {
            return Err(Error::Domain {
                op: "log",
                detail: format!("input {bad} outside (0, inf)"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Elementwise `1 / x`; zero or non-finite inputs are rejected.
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self
            .value(a)
            .data()
            .iter()
            .find(|&&x| x == 0.0 || !x.is_finite())
        {
            return Err(Error::Domain {
                op: "recip",
                detail: format!("input {bad}"),
            });
        }
        Ok(self.unary(a, |x| 1.0 / x, Op::Recip(a)))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Reduces the last axis: `[rows, cols] -> [rows, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let rows = data.len();
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(vec![rows, 1], data).expect("row count"),
            Op::SumCols(a),
            rg,
        )
    }

    /// `mu + sigma * eps` with a recorded noise sample.
    pub fn reparameterize(&mut self, mu: Var, sigma: Var, eps: Tensor) -> Result<Var> {
        if self.shape(mu) != self.shape(sigma) || self.shape(mu) != eps.shape() {
            return Err(Error::ShapeMismatch {
                op: "reparameterize",
                lhs: self.shape(mu).to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        let (m, s) = (self.value(mu), self.value(sigma));
        let data = m
            .data()
            .iter()
            .zip(s.data())
            .zip(eps.data())
            .map(|((&m, &s), &e)| m + s * e)
            .collect();
        let out = Tensor::new(m.shape().to_vec(), data)?;
        let rg = self.rg(&[mu, sigma]);
        Ok(self.push(out, Op::Reparameterize(mu, sigma, Arc::new(eps)), rg))
    }

    /// Accumulates d`loss`/d`leaf` into every trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if node.trainable {
                        match &mut self.grads[i] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            slot => *slot = Some(g),
                        }
                    }
                }
                op => self.propagate(op, &node.value, &g, &mut adj),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: &Var| -> &Tensor { &nodes[v.0].value };
        let wants = |v: &Var| nodes[v.0].requires_grad;
        // Zero-initialised adjoint buffer for an input.
        fn slot(adj: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(a) {
                    // dA = G Bᵀ
                    let buf = slot(adj, *a, m * k);
                    gemm(m, n, k, g, (n as isize, 1), tb.data(), (1, n as isize), buf);
                }
                if wants(b) {
                    // dB = Aᵀ G
                    let buf = slot(adj, *b, k * n);
                    gemm(k, m, n, ta.data(), (1, k as isize), g, (n as isize, 1), buf);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(a) {
                    let buf = slot(adj, *a, g.len());
                    buf.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(b) {
                    let n = val(b).numel();
                    let buf = slot(adj, *b, n);
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % n] += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let n = tb.numel();
                if wants(a) {
                    let buf = slot(adj, *a, g.len());
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i] += gi * tb.data()[i % n];
                    }
                }
                if wants(b) {
                    let buf = slot(adj, *b, n);
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % n] += gi * ta.data()[i];
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if wants(a) {
                    let buf = slot(adj, *a, g.len());
                    for i in 0..g.len() {
                        if ta.data()[i] <= tb.data()[i] {
                            buf[i] += g[i];
                        }
                    }
                }
                if wants(b) {
                    let buf = slot(adj, *b, g.len());
                    for i in 0..g.len() {
                        if ta.data()[i] > tb.data()[i] {
                            buf[i] += g[i];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let buf = slot(adj, *a, g.len());
                buf.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            Op::AddScalar(a) => {
                let buf = slot(adj, *a, g.len());
                buf.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::ScaleRows(a, f) => {
                let cols = out.cols();
                let buf = slot(adj, *a, g.len());
                for (i, (x, y)) in buf.iter_mut().zip(g).enumerate() {
                    *x += y * f[i / cols];
                }
            }
            Op::Concat(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let c = val(p).cols();
                    if wants(p) {
                        let buf = slot(adj, *p, rows * c);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            buf[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += c;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(p).numel();
                    if wants(p) {
                        let buf = slot(adj, *p, n);
                        buf.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(x, y)| *x += y);
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = val(a);
                let off = start * ta.cols();
                let buf = slot(adj, *a, ta.numel());
                buf[off..off + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, y)| *x += y);
            }
            Op::Tanh(a) => {
                let buf = slot(adj, *a, g.len());
                for ((x, &y), &o) in buf.iter_mut().zip(g).zip(out.data()) {
                    *x += y * (1.0 - o * o);
                }
            }
            Op::Sigmoid(a) => {
                let buf = slot(adj, *a, g.len());
                for ((x, &y), &o) in buf.iter_mut().zip(g).zip(out.data()) {
                    *x += y * o * (1.0 - o);
                }
            }
            Op::Relu(a) => {
                let ta = val(a);
                let buf = slot(adj, *a, g.len());
                for ((x, &y), &i) in buf.iter_mut().zip(g).zip(ta.data()) {
                    if i > 0.0 {
                        *x += y;
                    }
                }
            }
            Op::Softplus(a) => {
                let ta = val(a);
                let buf = slot(adj, *a, g.len());
                for ((x, &y), &i) in buf.iter_mut().zip(g).zip(ta.data()) {
                    *x += y * sigmoid(i);
                }
            }
            Op::Exp(a) => {
                let buf = slot(adj, *a, g.len());
                for ((x, &y), &o) in buf.iter_mut().zip(g).zip(out.data()) {
                    *x += y * o;
                }
            }
            Op::Log(a) => {
                let ta = val(a);
                let buf = slot(adj, *a, g.len());
                for ((x, &y), &i) in buf.iter_mut().zip(g).zip(ta.data()) {
                    *x += y / i;
                }
            }
            Op::Square(a) => {
                let ta = val(a);
                let buf = slot(adj, *a, g.len());
                for ((x, &y), &i) in buf.iter_mut().zip(g).zip(ta.data()) {
                    *x += 2.0 * y * i;
                }
            }
            Op::Recip(a) => {
                let buf = slot(adj, *a, g.len());
                for ((x, &y), &o) in buf.iter_mut().zip(g).zip(out.data()) {
                    *x -= y * o * o;
                }
            }
            Op::Clamp(a, lo, hi) => {
                let ta = val(a);
                let buf = slot(adj, *a, g.len());
                for ((x, &y), &i) in buf.iter_mut().zip(g).zip(ta.data()) {
                    if i >= *lo && i <= *hi {
                        *x += y;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = val(a).numel();
                let scale = if matches!(op, Op::Mean(_)) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                let buf = slot(adj, *a, n);
                buf.iter_mut().for_each(|x| *x += scale);
            }
            Op::SumCols(a) => {
                let ta = val(a);
                let cols = ta.cols();
                let buf = slot(adj, *a, ta.numel());
                for (i, x) in buf.iter_mut().enumerate() {
                    *x += g[i / cols];
                }
            }
            Op::Reparameterize(mu, sigma, eps) => {
                if wants(mu) {
                    let buf = slot(adj, *mu, g.len());
                    buf.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(sigma) {
                    let buf = slot(adj, *sigma, g.len());
                    for ((x, &y), &e) in buf.iter_mut().zip(g).zip(eps.data()) {
                        *x += y * e;
                    }
                }
            }
        }
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

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c += a · b` for an `m×k` by `k×n` product with arbitrary (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
