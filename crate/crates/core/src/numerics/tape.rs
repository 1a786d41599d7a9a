//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every op evaluates eagerly and appends a node to the tape; nodes only ever
//! reference earlier nodes, so a single reverse sweep is a valid topological
//! traversal. Leaves are either trainable parameters or constants. Gradients
//! are propagated only through nodes that depend on at least one parameter.
//!
//! The op set is closed: matmul, transpose, add/sub/mul with suffix
//! broadcasting, scale, concat/narrow/reshape, axis and full sums, softmax and
//! log-softmax over the last axis, layer-norm, GELU (tanh form), L2
//! normalization, sigmoid, log and embedding gather. Everything else in the
//! crate is composed from these.

use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Reshape(Var),
    SumAxis { input: Var, axis: usize },
    SumAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { input: Var, eps: f64 },
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    L2Normalize(Var),
    Gather { table: Var, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf; no gradient is ever produced for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op produced a consistent tensor")
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`. `b` is either `[k, n]` (shared across the leading
    /// axes of `a`) or `[.., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (k, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let m = sa[sa.len() - 2];
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; out_shape.iter().product()];
        if sb.len() == 2 {
            gemm(av, bv, &mut out, av.len() / k, k, n);
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::shape("matmul", &sa, &sb));
            }
            let batch = av.len() / (m * k);
            for bi in 0..batch {
                gemm(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        Ok(self.push(Self::tensor(out_shape, out), Op::MatMul { a, b }, &[a, b]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for b in 0..x.len() / (r * c) {
            transpose_block(&x[b * r * c..], &mut out[b * r * c..], r, c);
        }
        let mut shape = s.clone();
        let last = shape.len() - 1;
        shape.swap(last - 1, last);
        Ok(self.push(Self::tensor(shape, out), Op::Transpose(a), &[a]))
    }

    // ---- elementwise ----------------------------------------------------

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check_suffix(op_name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let bn = bv.len();
        let out = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % bn]))
            .collect();
        let shape = av.shape().to_vec();
        Ok(self.push(Self::tensor(shape, out), op, &[a, b]))
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s and is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let u = GELU_C * (x + GELU_K * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::domain("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::domain("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rest = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let node = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        Ok(self.push(Self::tensor(shape, out), node, inputs))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::domain(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, alen, inner) = split_axis(&s, axis);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(
            Self::tensor(shape, out),
            Op::Narrow { input, axis, start },
            &[input],
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(Error::domain("sum_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, alen, inner) = split_axis(&s, axis);
        let x = self.value(input).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..alen {
                let src = &x[(o * alen + a) * inner..(o * alen + a + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        Ok(self.push(
            Self::tensor(shape, out),
            Op::SumAxis { input, axis },
            &[input],
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(input), &[input])
    }

    // ---- normalizations -------------------------------------------------

    fn last_axis(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        let cols = *s.last().unwrap_or(&1);
        (self.value(v).numel() / cols, cols)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Var {
        let (rows, cols) = self.last_axis(input);
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let or = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (o, &v) in or.iter_mut().zip(xr) {
                *o = (v - max).exp();
                z += *o;
            }
            or.iter_mut().for_each(|o| *o /= z);
        }
        let shape = self.shape(input).to_vec();
        self.push(Self::tensor(shape, out), Op::Softmax(input), &[input])
    }

    /// Numerically stable `log(softmax(x))` over the last axis.
    pub fn log_softmax(&mut self, input: Var) -> Var {
        let (rows, cols) = self.last_axis(input);
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + xr.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
                *o = v - lse;
            }
        }
        let shape = self.shape(input).to_vec();
        self.push(Self::tensor(shape, out), Op::LogSoftmax(input), &[input])
    }

    /// Normalize the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, input: Var, eps: f64) -> Var {
        let (rows, cols) = self.last_axis(input);
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let (mean, inv_std) = moments(xr, eps);
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
                *o = (v - mean) * inv_std;
            }
        }
        let shape = self.shape(input).to_vec();
        self.push(Self::tensor(shape, out), Op::LayerNorm { input, eps }, &[input])
    }

    /// Scale every row of the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis(input);
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::domain("l2_normalize", format!("row {r} has norm {norm}")));
            }
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
                *o = v / norm;
            }
        }
        let shape = self.shape(input).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::L2Normalize(input), &[input]))
    }

    /// Rows of `table` (`[V, d]`) selected by `ids`; output is
    /// `lead ++ [d]` with `product(lead) == ids.len()`.
    pub fn gather(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("gather", &s, lead));
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::domain("gather", format!("id {bad} outside vocabulary of {vocab}")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let node = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(Self::tensor(shape, out), node, &[table]))
    }

    // ---- composites -----------------------------------------------------

    pub fn mean_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(input)
            .get(axis)
            .ok_or_else(|| Error::domain("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(input, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel();
        let s = self.sum(input);
        self.scale(s, 1.0 / n as f64)
    }

    /// `a @ bᵀ` for matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.transpose(b)?;
        self.matmul(a, bt)
    }

    /// `x + c` elementwise.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(x, k)
    }

    /// Cosine similarity between corresponding rows (last axis) of `a` and `b`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("cosine", self.shape(a), self.shape(b)));
        }
        let na = self.l2_normalize(a)?;
        let nb = self.l2_normalize(b)?;
        let prod = self.mul(na, nb)?;
        let last = self.shape(prod).len() - 1;
        self.sum_axis(prod, last)
    }

    /// Pairwise cosine similarities between the rows of two matrices.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.l2_normalize(a)?;
        let nb = self.l2_normalize(b)?;
        self.matmul_t(na, nb)
    }

    /// `x @ w + b`, with `w: [d_in, d_out]` and `b: [d_out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    // ---- reverse sweep --------------------------------------------------

    /// Propagate gradients from the scalar `loss` back to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let leaf_grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) => Some(Self::tensor(node.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads: leaf_grads,
            shapes,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (k, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
                let m = sa[sa.len() - 2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if sb.len() == 2 {
                    let rows = av.len() / k;
                    if let Some(ga) = self.slot(grads, *a) {
                        gemm_nt(g, bv, ga, rows, n, k);
                    }
                    if let Some(gb) = self.slot(grads, *b) {
                        gemm_tn(av, g, gb, rows, k, n);
                    }
                } else {
                    let batch = av.len() / (m * k);
                    if let Some(ga) = self.slot(grads, *a) {
                        for bi in 0..batch {
                            gemm_nt(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bv[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    if let Some(gb) = self.slot(grads, *b) {
                        for bi in 0..batch {
                            gemm_tn(
                                &av[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(ga) = self.slot(grads, *a) {
                    let mut tmp = vec![0.0; r * c];
                    for b in 0..g.len() / (r * c) {
                        transpose_block(&g[b * r * c..], &mut tmp, c, r);
                        for (d, t) in ga[b * r * c..(b + 1) * r * c].iter_mut().zip(&tmp) {
                            *d += t;
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let bn = gb.len();
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % bn] += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bn = bv.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i] += gi * bv[i % bn];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % bn] += gi * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, &gi) in ga.iter_mut().zip(g) {
                        *d += c * gi;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if let Some(gv) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gv[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let (outer, alen, inner) = split_axis(self.shape(*input), *axis);
                let len = node.value.shape()[*axis];
                if let Some(gi) = self.slot(grads, *input) {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        add_into(
                            &mut gi[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::SumAxis { input, axis } => {
                let (outer, alen, inner) = split_axis(self.shape(*input), *axis);
                if let Some(gi) = self.slot(grads, *input) {
                    for o in 0..outer {
                        for a in 0..alen {
                            add_into(
                                &mut gi[(o * alen + a) * inner..(o * alen + a + 1) * inner],
                                &g[o * inner..(o + 1) * inner],
                            );
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Softmax(a) => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..y.len() / cols {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..y.len() / cols {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..cols {
                            ga[r * cols + j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm { input, eps } => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                let x = self.value(*input).data();
                if let Some(gi) = self.slot(grads, *input) {
                    for r in 0..y.len() / cols {
                        let (_, inv_std) = moments(&x[r * cols..(r + 1) * cols], *eps);
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let gmean = gr.iter().sum::<f64>() / cols as f64;
                        let gymean = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            gi[r * cols + j] += inv_std * (gr[j] - gmean - yr[j] * gymean);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..x.len() {
                        let xi = x[i];
                        let t = (GELU_C * (xi + GELU_K * xi * xi * xi)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * xi * xi);
                        ga[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..y.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..x.len() {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
            Op::L2Normalize(a) => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..y.len() / cols {
                        let xr = &x[r * cols..(r + 1) * cols];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                }
            }
        }
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is a constant or unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, with zeros for unreachable leaves and constants.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn moments(x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_block(src: &[f64], dst: &mut [f64], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..c {
            dst[j * r + i] = src[i * c + j];
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`. Each output row depends only on the matching
/// row of `a`, so results do not depend on how rows are batched together.
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`.
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · c[m×n]`.
fn gemm_tn(a: &[f64], c: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
}
