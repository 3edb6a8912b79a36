//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Leaves hold caller-provided
//! tensors; every other node records the op that produced it and the ids of
//! its inputs. Because nodes are only ever appended, index order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Gradients accumulate into the leaves' `grad` field across calls to
//! `backward`; call [`Graph::zero_grad`] to reset them. Intermediate node
//! gradients are never stored.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{NumericsError, Result, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Affine(Var, Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    LogSumExpRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    Select(Var, usize),
    Sum(Var),
    Mean(Var),
    L2NormRows(Var),
    NormalizeRows(Var),
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<S = f64> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Result<Var> {
        if !tensor.all_finite() {
            return Err(NumericsError::NonFinite { op: "leaf" });
        }
        let requires_grad = tensor.requires_grad();
        Ok(self.push(tensor, Op::Leaf, requires_grad))
    }

    /// Adds a leaf that requires a gradient.
    pub fn param(&mut self, tensor: Tensor<S>) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<S>) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> Result<S> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(NumericsError::NotScalar(t.shape().to_vec()));
        }
        Ok(t.data()[0])
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn dims2(&self, name: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| NumericsError::invalid(
            name,
            format!("expected a rank-2 operand, got shape {:?}", self.value(v).shape()),
        ))
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2("matmul", a)?;
        let (k2, m) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: vec![n, k],
                rhs: vec![k2, m],
            });
        }
        let mut out = vec![S::zero(); n * m];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.record("matmul", vec![n, m], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let x = self.value(a).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        self.record("transpose", vec![c, r], out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let shape = x.shape().to_vec();
        self.record(name, shape, out, op, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        self.map("scale", a, |x| x * c, Op::Scale(a, c))
    }

    /// `x·w + b` with `x: n×i`, `w: i×o`, `b: 1×o` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, i) = self.dims2("affine", x)?;
        let (i2, o) = self.dims2("affine", w)?;
        if i != i2 {
            return Err(NumericsError::ShapeMismatch {
                op: "affine",
                lhs: vec![n, i],
                rhs: vec![i2, o],
            });
        }
        let bias = self.value(b);
        if bias.numel() != o {
            return Err(NumericsError::ShapeMismatch {
                op: "affine",
                lhs: vec![i2, o],
                rhs: bias.shape().to_vec(),
            });
        }
        let mut out: Vec<S> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
        gemm_nn(self.value(x).data(), self.value(w).data(), &mut out, n, i, o);
        self.record("affine", vec![n, o], out, Op::Affine(x, w, b), &[x, w, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| if x > S::zero() { x } else { S::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, S::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// `log(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map("softplus", a, |x| x.max(S::zero()) + (-x.abs()).exp().ln_1p(), Op::Softplus(a))
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let x = self.value(a);
        let out = x.data().iter().map(|&v| f(v)).collect();
        let shape = x.shape().to_vec();
        self.record(name, shape, out, op, &[a])
    }

    /// Row-wise `log Σ_j exp(x_ij)`, max-shifted; output `n×1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2("logsumexp", a)?;
        let x = self.value(a).data();
        let out = (0..n).map(|i| logsumexp(&x[i * m..(i + 1) * m])).collect();
        self.record("logsumexp", vec![n, 1], out, Op::LogSumExpRows(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2("softmax", a)?;
        let x = self.value(a).data();
        let mut out = vec![S::zero(); n * m];
        for (row, dst) in x.chunks(m).zip(out.chunks_mut(m)) {
            softmax_into(row, dst);
        }
        self.record("softmax", vec![n, m], out, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2("log_softmax", a)?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * m);
        for row in x.chunks(m) {
            let lse = logsumexp(row);
            out.extend(row.iter().map(|&v| v - lse));
        }
        self.record("log_softmax", vec![n, m], out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Picks `x[i, idx[i]]` from every row; output `n×1`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.dims2("gather", a)?;
        if idx.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "gather",
                lhs: vec![n, m],
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= m) {
            return Err(NumericsError::invalid("gather", format!("index {bad} out of range for {m} columns")));
        }
        let x = self.value(a).data();
        let out = idx.iter().enumerate().map(|(i, &j)| x[i * m + j]).collect();
        self.record("gather", vec![n, 1], out, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims2("slice_cols", a)?;
        if start >= end || end > m {
            return Err(NumericsError::invalid("slice_cols", format!("range {start}..{end} invalid for {m} columns")));
        }
        let x = self.value(a).data();
        let out = x.chunks(m).flat_map(|row| row[start..end].iter().copied()).collect();
        self.record("slice_cols", vec![n, end - start], out, Op::SliceCols(a, start, end), &[a])
    }

    /// The element at flat (row-major) position `index`, as a `1×1` node.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let x = self.value(a);
        if index >= x.numel() {
            return Err(NumericsError::invalid("select", format!("index {index} out of range for {} values", x.numel())));
        }
        let v = x.data()[index];
        self.record("select", vec![1, 1], vec![v], Op::Select(a, index), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.record("sum", vec![1, 1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s: S = x.data().iter().copied().sum();
        let n = S::lit(x.numel() as f64);
        self.record("mean", vec![1, 1], vec![s / n], Op::Mean(a), &[a])
    }

    /// Row-wise Euclidean norm; output `n×1`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2("l2_norm", a)?;
        let x = self.value(a).data();
        let out = x.chunks(m).map(norm).collect();
        self.record("l2_norm", vec![n, 1], out, Op::L2NormRows(a), &[a])
    }

    /// Each row divided by its Euclidean norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2("normalize", a)?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * m);
        for row in x.chunks(m) {
            let r = norm(row);
            if r == S::zero() {
                return Err(NumericsError::invalid("normalize", "zero-norm row"));
            }
            out.extend(row.iter().map(|&v| v / r));
        }
        self.record("normalize", vec![n, m], out, Op::NormalizeRows(a), &[a])
    }

    /// Accumulates `∂loss/∂leaf` into every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NumericsError::NotScalar(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2().expect("checked in forward");
                let m = self.value(*b).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nt(g, self.value(*b).data(), ga, n, m, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn(self.value(*a).data(), g, gb, k, n, m);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("checked in forward");
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let other = self.value(*b).data();
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(other) {
                        *d += s * o;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let other = self.value(*a).data();
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(other) {
                        *d += s * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c);
                }
            }
            Op::Affine(x, w, b) => {
                let (n, i) = self.value(*x).dims2().expect("checked in forward");
                let o = self.value(*w).shape()[1];
                if let Some(gx) = self.slot(grads, *x) {
                    gemm_nt(g, self.value(*w).data(), gx, n, o, i);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm_tn(self.value(*x).data(), g, gw, i, n, o);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(o) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &s), &out) in ga.iter_mut().zip(g).zip(y) {
                        if out > S::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &s), &out) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * (S::one() - out * out);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &s), &out) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * out * (S::one() - out);
                    }
                }
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &s), &v) in ga.iter_mut().zip(g).zip(x) {
                        *d += s * sigmoid(v);
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                let (_, m) = self.value(*a).dims2().expect("checked in forward");
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, (row, dst)) in x.chunks(m).zip(ga.chunks_mut(m)).enumerate() {
                        for (d, &v) in dst.iter_mut().zip(row) {
                            *d += g[i] * (v - y[i]).exp();
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let (_, m) = self.value(*a).dims2().expect("checked in forward");
                if let Some(ga) = self.slot(grads, *a) {
                    for ((prob, gr), dst) in y.chunks(m).zip(g.chunks(m)).zip(ga.chunks_mut(m)) {
                        let dot: S = prob.iter().zip(gr).map(|(&p, &s)| p * s).sum();
                        for ((d, &p), &s) in dst.iter_mut().zip(prob).zip(gr) {
                            *d += p * (s - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let (_, m) = self.value(*a).dims2().expect("checked in forward");
                if let Some(ga) = self.slot(grads, *a) {
                    for ((logp, gr), dst) in y.chunks(m).zip(g.chunks(m)).zip(ga.chunks_mut(m)) {
                        let total: S = gr.iter().copied().sum();
                        for ((d, &lp), &s) in dst.iter_mut().zip(logp).zip(gr) {
                            *d += s - lp.exp() * total;
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let m = self.value(*a).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * m + j] += g[i];
                    }
                }
            }
            Op::SliceCols(a, start, end) => {
                let m = self.value(*a).shape()[1];
                let w = end - start;
                if let Some(ga) = self.slot(grads, *a) {
                    for (dst, src) in ga.chunks_mut(m).zip(g.chunks(w)) {
                        add_into(&mut dst[*start..*end], src);
                    }
                }
            }
            Op::Select(a, index) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga[*index] += g[0];
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g[0] / S::lit(ga.len() as f64);
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::L2NormRows(a) => {
                let m = self.value(*a).shape()[1];
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, (row, dst)) in x.chunks(m).zip(ga.chunks_mut(m)).enumerate() {
                        // subgradient 0 at the origin
                        if y[i] > S::zero() {
                            let s = g[i] / y[i];
                            dst.iter_mut().zip(row).for_each(|(d, &v)| *d += s * v);
                        }
                    }
                }
            }
            Op::NormalizeRows(a) => {
                let m = self.value(*a).shape()[1];
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for (((row, unit), gr), dst) in x.chunks(m).zip(y.chunks(m)).zip(g.chunks(m)).zip(ga.chunks_mut(m)) {
                        let r = norm(row);
                        let dot: S = unit.iter().zip(gr).map(|(&u, &s)| u * s).sum();
                        for ((d, &u), &s) in dst.iter_mut().zip(unit).zip(gr) {
                            *d += (s - u * dot) / r;
                        }
                    }
                }
            }
        }
    }

    /// Lazily zero-initialized gradient buffer for `v`, or `None` if `v` does
    /// not track gradients.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn norm<S: Scalar>(row: &[S]) -> S {
    row.iter().map(|&v| v * v).sum::<S>().sqrt()
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Max-shifted `log Σ exp(x_i)`.
pub fn logsumexp<S: Scalar>(x: &[S]) -> S {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return max;
    }
    let s: S = x.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Max-shifted softmax of `x` written into `out`.
pub fn softmax_into<S: Scalar>(x: &[S], out: &mut [S]) {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}
