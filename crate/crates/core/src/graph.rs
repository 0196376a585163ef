//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass, so nodes are topologically ordered by
//! construction. [`Graph::backward`] walks the tape once in reverse.
//!
//! Broadcasting is never implicit: element-wise ops require equal shapes and
//! [`Graph::broadcast_to`] must be called explicitly. The only exception is
//! the leading batch dimensions of [`Graph::matmul`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{numel, strides, Element, Layout, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    /// Not a node; overwritten before any use.
    pub(crate) const PLACEHOLDER: Var = Var(usize::MAX);

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    BroadcastTo(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::BroadcastTo(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Slice { x, .. } => vec![*x],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<E> {
    value: Tensor<E>,
    op: Op,
    requires_grad: bool,
    /// Op-specific activations kept for backward (normalized inputs, probabilities, ...).
    saved: Vec<E>,
    grad: Option<Vec<E>>,
}

/// A single-use differentiation tape. Parameters bound via [`Graph::param`]
/// must all come from one [`ParamStore`].
#[derive(Debug)]
pub struct Graph<E> {
    nodes: Vec<Node<E>>,
    bound: HashMap<ParamId, (Var, String)>,
    no_grad: bool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            no_grad: false,
        }
    }

    /// A graph in which nothing requires a gradient (evaluation mode).
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op, saved: Vec<E>) -> Var {
        let requires_grad = !self.no_grad
            && op
                .inputs()
                .iter()
                .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            saved,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && !self.no_grad,
            saved: Vec::new(),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf (data); never receives a gradient.
    pub fn input(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    /// A free leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, true)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<E>, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        if let Some((v, bound_name)) = self.bound.get(&id) {
            if bound_name != name {
                return Err(Error::Contract(format!(
                    "graph already binds `{bound_name}` from another parameter store, not `{name}`"
                )));
            }
            return Ok(*v);
        }
        let p = store.by_id(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.bound.insert(id, (v, name.to_string()));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the most recent [`Graph::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// True when `target` is reachable from `v` by following op inputs.
    pub fn depends_on(&self, v: Var, target: Var) -> bool {
        if target.0 > v.0 {
            return false;
        }
        let mut seen = vec![false; v.0 + 1];
        let mut stack = vec![v];
        while let Some(n) = stack.pop() {
            if n == target {
                return true;
            }
            if std::mem::replace(&mut seen[n.0], true) {
                continue;
            }
            stack.extend(self.nodes[n.0].op.inputs().into_iter().filter(|i| i.0 >= target.0));
        }
        false
    }

    // ---- element-wise -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Tensor<E> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(E) -> E) -> Tensor<E> {
        let vx = self.value(x);
        Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), Vec::new()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), Vec::new()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), Vec::new()))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let c = E::of(factor);
        let out = self.map(x, |v| v * c);
        self.push(out, Op::Scale(x, factor), Vec::new())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| if v > E::zero() { v } else { E::zero() });
        self.push(out, Op::Relu(x), Vec::new())
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = E::of(0.5);
        let inv_sqrt2 = E::of(std::f64::consts::FRAC_1_SQRT_2);
        let out = self.map(x, |v| half * v * (E::one() + (v * inv_sqrt2).erf()));
        self.push(out, Op::Gelu(x), Vec::new())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid(x), Vec::new())
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        Ok(self.push(out, Op::Reshape(x), Vec::new()))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != in_shape.len() || check.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::dim("permute", &in_shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let index = permute_index(&in_shape, perm);
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), Vec::new()))
    }

    /// Explicit numpy-style broadcast: `x`'s shape is right-aligned against
    /// `shape` and each of its dimensions must be 1 or equal.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let index = broadcast_index(self.shape(x), shape)
            .ok_or_else(|| Error::dim("broadcast_to", self.shape(x), shape))?;
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::BroadcastTo(x), Vec::new()))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("slice", &shape, &[axis, start, len]));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, Vec::new()))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            Vec::new(),
        ))
    }

    /// Concatenation along the sequence axis (second to last) of `[..., len_i, d]` parts.
    pub fn concat_seq(&mut self, parts: &[Var]) -> Result<Var> {
        let rank = parts
            .first()
            .map(|p| self.shape(*p).len())
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        if rank < 2 {
            return Err(Error::dim("concat_seq", self.shape(parts[0]), &[]));
        }
        self.concat(parts, rank - 2)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: E = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), Vec::new())
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: E = v.data().iter().copied().sum();
        let m = s / E::of(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), Vec::new())
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[..., m, k] × [..., k, n] → [..., m, n]`. Batch dimensions must match,
    /// or one operand may be a plain matrix shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[..., m, k] × ([..., n, k])ᵀ → [..., m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b), trans_b)?;
        let mut out = vec![E::zero(); plan.out_numel()];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let b_layout = if trans_b {
            Layout::Transposed
        } else {
            Layout::Normal
        };
        for i in 0..plan.batches {
            E::gemm(
                plan.m,
                plan.k,
                plan.n,
                &va[plan.a_off(i)..],
                Layout::Normal,
                &vb[plan.b_off(i)..],
                b_layout,
                &mut out[plan.c_off(i)..],
                false,
            );
        }
        let t = Tensor::new(plan.out_shape.clone(), out)?;
        Ok(self.push(t, Op::MatMul { a, b, trans_b }, Vec::new()))
    }

    /// `x · wᵀ + b` with `x: [..., in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[1] {
            return Err(Error::dim("linear", &xs, &ws));
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                return Err(Error::dim("linear bias", &ws, self.shape(b)));
            }
        }
        let rows = numel(&xs) / in_f;
        let mut out = vec![E::zero(); rows * out_f];
        E::gemm(
            rows,
            in_f,
            out_f,
            self.value(x).data(),
            Layout::Normal,
            self.value(w).data(),
            Layout::Transposed,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(out_f) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = out_f;
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, Vec::new()))
    }

    // ---- normalization and losses ----------------------------------------

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = *v
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "NaN input".into(),
            });
        }
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_row(row);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x), Vec::new()))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs
            .last()
            .ok_or_else(|| Error::Contract("layer_norm of a scalar".into()))?;
        if self.shape(gamma) != [d] {
            return Err(Error::dim("layer_norm gamma", &xs, self.shape(gamma)));
        }
        if self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm beta", &xs, self.shape(beta)));
        }
        let eps = E::of(eps);
        let inv_d = E::of(1.0 / d as f64);
        let src = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        // saved layout: normalized inputs, then one reciprocal std per row
        let mut saved = Vec::with_capacity(src.len() + rows);
        let mut rstds = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks_exact(d) {
            let mean = row.iter().copied().sum::<E>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_d;
            let rstd = (var + eps).sqrt().recip();
            for (j, &v) in row.iter().enumerate() {
                let xhat = (v - mean) * rstd;
                saved.push(xhat);
                out.push(xhat * g[j] + bt[j]);
            }
            rstds.push(rstd);
        }
        saved.extend(rstds);
        let t = Tensor::new(xs, out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta }, saved))
    }

    /// Mean softmax cross-entropy of `logits: [batch, classes]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("cross_entropy", &s, &[labels.len()]));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let v = self.value(logits).data();
        if v.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric {
                op: "cross_entropy",
                detail: "NaN logits".into(),
            });
        }
        let mut probs = v.to_vec();
        let mut total = E::zero();
        for (row, (&l, raw)) in probs
            .chunks_exact_mut(c)
            .zip(labels.iter().zip(v.chunks_exact(c)))
        {
            let max = raw.iter().copied().fold(E::neg_infinity(), E::max);
            let lse = max + raw.iter().map(|&z| (z - max).exp()).sum::<E>().ln();
            total += lse - raw[l];
            softmax_row(row);
        }
        let loss = total / E::of(labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            probs,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Populates gradients of `loss` (a single-element tensor) for every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<E>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Adds the gradients of bound parameter leaves into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<E>) {
        for (&id, &(v, _)) in &self.bound {
            if let Some(g) = self.nodes[v.0].grad.as_deref() {
                store.accumulate_grad(id, g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(x, factor) => {
                let c = E::of(*factor);
                self.acc(grads, *x, |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c);
                });
            }
            Op::BroadcastTo(x) => {
                let index = broadcast_index(self.shape(*x), node.value.shape()).expect("validated");
                self.acc(grads, *x, |d| {
                    for (&src, &g) in index.iter().zip(g) {
                        d[src] += g;
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, g)),
            Op::Permute(x, perm) => {
                let index = permute_index(self.shape(*x), perm);
                self.acc(grads, *x, |d| {
                    for (&src, &g) in index.iter().zip(g) {
                        d[src] += g;
                    }
                });
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let len = node.value.shape()[*axis];
                let full = shape[*axis];
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut d[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[*axis + 1..]);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    self.acc(grads, p, |d| {
                        for o in 0..outer {
                            let src = o * total + offset;
                            add_into(&mut d[o * len..(o + 1) * len], &g[src..src + len]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                        if v > E::zero() {
                            *d += g;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                let half = E::of(0.5);
                let inv_sqrt2 = E::of(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = E::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                self.acc(grads, *x, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                        let cdf = half * (E::one() + (v * inv_sqrt2).erf());
                        let pdf = (-half * v * v).exp() * inv_sqrt_2pi;
                        *d += g * (cdf + v * pdf);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((d, &g), &s) in d.iter_mut().zip(g).zip(y) {
                        *d += g * s * (E::one() - s);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                self.acc(grads, *x, |d| {
                    for ((d, g), y) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let dot: E = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d_model = *node.value.shape().last().unwrap();
                let rows = node.value.numel() / d_model;
                let (xhat, rstd) = node.saved.split_at(rows * d_model);
                let gm = self.value(*gamma).data();
                self.acc(grads, *gamma, |d| {
                    for (g, xh) in g.chunks_exact(d_model).zip(xhat.chunks_exact(d_model)) {
                        for j in 0..d_model {
                            d[j] += g[j] * xh[j];
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for g in g.chunks_exact(d_model) {
                        add_into(d, g);
                    }
                });
                let inv_d = E::of(1.0 / d_model as f64);
                self.acc(grads, *x, |d| {
                    let mut dxhat = vec![E::zero(); d_model];
                    for r in 0..rows {
                        let span = r * d_model..(r + 1) * d_model;
                        let (g, xh) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut m1 = E::zero();
                        let mut m2 = E::zero();
                        for j in 0..d_model {
                            dxhat[j] = g[j] * gm[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xh[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for (j, dv) in d[span].iter_mut().enumerate() {
                            *dv += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let c = g[0] / E::of(self.value(*x).numel() as f64);
                self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += c));
            }
            Op::CrossEntropy { logits, labels } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / E::of(labels.len() as f64);
                self.acc(grads, *logits, |d| {
                    for ((d, p), &l) in d.chunks_exact_mut(c).zip(node.saved.chunks_exact(c)).zip(labels) {
                        for (j, (d, &p)) in d.iter_mut().zip(p).enumerate() {
                            let t = if j == l { E::one() } else { E::zero() };
                            *d += (p - t) * scale;
                        }
                    }
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let plan = MatmulPlan::new(self.shape(*a), self.shape(*b), *trans_b).expect("validated");
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    let b_layout = if *trans_b {
                        Layout::Normal
                    } else {
                        Layout::Transposed
                    };
                    for i in 0..plan.batches {
                        E::gemm(
                            plan.m,
                            plan.n,
                            plan.k,
                            &g[plan.c_off(i)..],
                            Layout::Normal,
                            &vb[plan.b_off(i)..],
                            b_layout,
                            &mut d[plan.a_off(i)..],
                            true,
                        );
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..plan.batches {
                        if *trans_b {
                            // dB [n, k] = dCᵀ · A
                            E::gemm(
                                plan.n,
                                plan.m,
                                plan.k,
                                &g[plan.c_off(i)..],
                                Layout::Transposed,
                                &va[plan.a_off(i)..],
                                Layout::Normal,
                                &mut d[plan.b_off(i)..],
                                true,
                            );
                        } else {
                            // dB [k, n] = Aᵀ · dC
                            E::gemm(
                                plan.k,
                                plan.m,
                                plan.n,
                                &va[plan.a_off(i)..],
                                Layout::Transposed,
                                &g[plan.c_off(i)..],
                                Layout::Normal,
                                &mut d[plan.b_off(i)..],
                                true,
                            );
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (out_f, in_f) = (ws[0], ws[1]);
                let rows = node.value.numel() / out_f;
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |d| {
                    E::gemm(rows, out_f, in_f, g, Layout::Normal, vw, Layout::Normal, d, true);
                });
                self.acc(grads, *w, |d| {
                    E::gemm(out_f, rows, in_f, g, Layout::Transposed, vx, Layout::Normal, d, true);
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for row in g.chunks_exact(out_f) {
                            add_into(d, row);
                        }
                    });
                }
            }
        }
    }

    /// Runs `f` on `v`'s gradient buffer (allocated on demand) when `v` requires a gradient.
    fn acc(&self, grads: &mut [Option<Vec<E>>], v: Var, f: impl FnOnce(&mut [E])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = grads[v.0].get_or_insert_with(|| vec![E::zero(); n]);
        f(buf);
    }
}

fn add_into<E: Element>(dst: &mut [E], src: &[E]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn sigmoid<E: Element>(v: E) -> E {
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

pub(crate) fn softmax_row<E: Element>(row: &mut [E]) {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut total = E::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// For each output element of `x.permute(perm)`, the flat source index in `x`.
fn permute_index(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    strided_index(&out_shape, &src_strides)
}

/// For each output element of a broadcast from `from` to `to`, the flat source index.
fn broadcast_index(from: &[usize], to: &[usize]) -> Option<Vec<usize>> {
    if from.len() > to.len() || to.contains(&0) {
        return None;
    }
    let pad = to.len() - from.len();
    let from_strides = strides(from);
    let mut src_strides = vec![0; to.len()];
    for (i, (&f, &s)) in from.iter().zip(&from_strides).enumerate() {
        let t = to[pad + i];
        if f == t {
            src_strides[pad + i] = s;
        } else if f != 1 {
            return None;
        }
    }
    Some(strided_index(to, &src_strides))
}

fn strided_index(shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let total = numel(shape);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(offset);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            offset -= src_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batches: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::dim("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if k != bk {
            return Err(Error::dim("matmul", a, b));
        }
        let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let mut plan = MatmulPlan {
            m,
            k,
            n,
            batches: 1,
            a_batched: false,
            b_batched: false,
            out_shape: Vec::new(),
        };
        if bb.is_empty() {
            // fold a's batch into its rows: one large product
            plan.m = m * numel(ab);
            plan.out_shape = ab.to_vec();
        } else if ab.is_empty() {
            plan.batches = numel(bb);
            plan.b_batched = true;
            plan.out_shape = bb.to_vec();
        } else if ab == bb {
            plan.batches = numel(ab);
            plan.a_batched = true;
            plan.b_batched = true;
            plan.out_shape = ab.to_vec();
        } else {
            return Err(Error::dim("matmul", a, b));
        }
        plan.out_shape.extend([m, n]);
        Ok(plan)
    }

    fn out_numel(&self) -> usize {
        self.batches * self.m * self.n
    }

    fn a_off(&self, i: usize) -> usize {
        if self.a_batched {
            i * self.m * self.k
        } else {
            0
        }
    }

    fn b_off(&self, i: usize) -> usize {
        if self.b_batched {
            i * self.k * self.n
        } else {
            0
        }
    }

    fn c_off(&self, i: usize) -> usize {
        i * self.m * self.n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_small() {
        let mut g = Graph::<f64>::new();
        let i = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.input(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let r = g.input(t(&[1, 2], &[1.0, 2.0]));
        let col = g.input(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(r, col).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
        assert_eq!(g.shape(p), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.input(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);

        let x = g.input(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 3], &[2.0, 2.0, 2.0, -1.0, -1.0, -1.0]));
        let one = g.input(Tensor::full(vec![3], 1.0));
        let zero = g.input(Tensor::zeros(vec![3]));
        let y = g.layer_norm(x, one, zero, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.input(t(&[2, 3], &[1.0, 5.0, -2.0, 0.3, 0.1, 9.0]));
        let b = g.input(t(&[3], &[0.5, -1.0, 2.0]));
        let y = g.layer_norm(x, zero, b, 1e-6).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn concat_seq_shapes_and_single_part() {
        let mut g = Graph::<f64>::new();
        let d = 4;
        let x = g.input(Tensor::full(vec![1, d], 1.0));
        let p = g.input(Tensor::full(vec![3, d], 2.0));
        let e = g.input(Tensor::full(vec![5, d], 3.0));
        let c = g.concat_seq(&[x, p, e]).unwrap();
        assert_eq!(g.shape(c), &[9, d]);
        let single = g.concat_seq(&[p]).unwrap();
        assert_eq!(g.value(single), g.value(p));

        let bad = g.input(Tensor::zeros(vec![2, d + 1]));
        assert!(matches!(g.concat_seq(&[x, bad]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn concat_backward_slices_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(Tensor::full(vec![2, 3], 0.5));
        let b = g.variable(Tensor::full(vec![4, 3], -0.5));
        let c = g.concat_seq(&[a, b]).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 6]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn backward_simple_losses() {
        let mut g = Graph::<f64>::new();
        let w = g.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.variable(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.input(t(&[2], &[1.0, 2.0]));
        let w = g.variable(t(&[2], &[3.0, 4.0]));
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn dependency_query() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(vec![2]));
        let b = g.variable(Tensor::zeros(vec![2]));
        let c = g.relu(b);
        let d = g.add(a, c).unwrap();
        assert!(g.depends_on(d, a));
        assert!(g.depends_on(d, b));
        assert!(!g.depends_on(c, a));
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::<f64>::new();
        let v = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.broadcast_to(v, &[2, 3]).unwrap();
        assert_eq!(g.value(b).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = g.sum(b);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 2.0, 2.0]);

        let col = g.input(t(&[2, 1], &[1.0, 2.0]));
        let wide = g.broadcast_to(col, &[4, 2, 3]).unwrap();
        assert_eq!(&g.value(wide).data()[..6], &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(g.broadcast_to(v, &[2, 4]).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.input(t(&[2, 3, 4], &data));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        // y[i][j][k] = x[j][k][i]
        assert_eq!(g.value(y).data()[1], data[4]);
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z).data(), &data[..]);
    }

    #[test]
    fn cross_entropy_value() {
        let mut g = Graph::<f64>::new();
        let z = g.input(t(&[2, 2], &[0.0, 0.0, 2.0, 0.0]));
        let l = g.cross_entropy(z, &[0, 1]).unwrap();
        let expect = (2f64.ln() + (1.0 + 2f64.exp()).ln() - 0.0) / 2.0;
        assert!((g.value(l).data()[0] - expect).abs() < 1e-14);
        assert!(g.cross_entropy(z, &[0, 2]).is_err());
    }

    #[test]
    fn binding_a_second_store_is_refused() {
        use crate::param::{ParamGroup, Parameter};
        let mut a = ParamStore::new();
        a.insert(Parameter::new("w", t(&[1], &[1.0]), ParamGroup::Head)).unwrap();
        let mut b = ParamStore::new();
        b.insert(Parameter::new("v", t(&[1], &[2.0]), ParamGroup::Head)).unwrap();
        let mut g = Graph::new();
        g.param(&a, "w").unwrap();
        assert!(matches!(g.param(&b, "v"), Err(Error::Contract(_))));
    }
}
