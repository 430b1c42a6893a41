//! Tensor operations: forward builders and their backward rules.
//!
//! Every differentiable op appends one tape node; `backward_node` replays
//! the matching rule. Elementwise ops broadcast trailing dimensions
//! (size-1 expansion only); gradients of broadcast operands are reduced
//! back to the operand shape.

use crate::error::{Error, Result};
use crate::kernels::{self, parallel_enabled, walk1, walk2};
use crate::scalar::Element;
use crate::shape::{self, broadcast_strides, check_axis, numel, strides};
use crate::tensor::{put_grad, take_grad, Node, Op, Tensor};

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && small == &big[big.len() - small.len()..]
}

fn binary_forward<T: Element>(
    op: &'static str,
    a_data: &[T],
    a_shape: &[usize],
    b_data: &[T],
    b_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<T>, Vec<usize>)> {
    let oshape = shape::broadcast_shape(op, a_shape, b_shape)?;
    let n = numel(&oshape);
    let mut out: Vec<T>;
    if a_shape == b_shape {
        out = a_data.iter().zip(b_data).map(|(&x, &y)| f(x, y)).collect();
    } else if is_suffix(b_shape, a_shape) {
        let bn = b_data.len().max(1);
        out = Vec::with_capacity(n);
        for (i, &x) in a_data.iter().enumerate() {
            out.push(f(x, b_data[i % bn]));
        }
    } else if is_suffix(a_shape, b_shape) {
        let an = a_data.len().max(1);
        out = Vec::with_capacity(n);
        for (i, &y) in b_data.iter().enumerate() {
            out.push(f(a_data[i % an], y));
        }
    } else {
        let sa = broadcast_strides(a_shape, &oshape);
        let sb = broadcast_strides(b_shape, &oshape);
        out = vec![T::zero(); n];
        walk2(&oshape, &sa, &sb, |i, ia, ib| out[i] = f(a_data[ia], b_data[ib]));
    }
    Ok((out, oshape))
}

/// (outer, len, inner) decomposition around one axis.
fn around_axis(shape_: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape_[..axis].iter().product();
    let len = shape_[axis];
    let inner: usize = shape_[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<T: Element> Tensor<T> {
    fn unary(
        &self,
        f: impl Fn(T) -> T,
        op: impl FnOnce(usize) -> Op<T>,
    ) -> Tensor<T> {
        let (data, shape_, req) = {
            let nodes = self.graph.inner.nodes.borrow();
            let n = &nodes[self.id];
            (n.data.iter().map(|&x| f(x)).collect::<Vec<T>>(), n.shape.clone(), n.requires_grad)
        };
        self.graph.push(shape_, data, req, op(self.id))
    }

    fn binary(
        &self,
        other: &Tensor<T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Tensor<T>> {
        self.check_same_graph(other, name)?;
        let (data, oshape, req) = {
            let nodes = self.graph.inner.nodes.borrow();
            let (na, nb) = (&nodes[self.id], &nodes[other.id]);
            let (d, s) = binary_forward(name, &na.data, &na.shape, &nb.data, &nb.shape, f)?;
            (d, s, na.requires_grad || nb.requires_grad)
        };
        Ok(self.graph.push(oshape, data, req, op(self.id, other.id)))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "div", |x, y| x / y, |a, b| Op::Div { a, b })
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.unary(|x| x * c, |a| Op::Scale { a, c })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary(|x| x + c, |a| Op::AddScalar { a })
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |a| Op::Exp { a })
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|x| x.tanh(), |a| Op::Tanh { a })
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&self) -> Tensor<T> {
        let c0 = T::from_f64(GELU_C0).unwrap();
        let c1 = T::from_f64(GELU_C1).unwrap();
        let half = T::from_f64(0.5).unwrap();
        self.unary(
            move |x| half * x * (T::one() + (c0 * (x + c1 * x * x * x)).tanh()),
            |a| Op::Gelu { a },
        )
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary(|x| x.sqrt(), |a| Op::Sqrt { a })
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(|x| x.abs(), |a| Op::Abs { a })
    }

    /// Elementwise `max(x, c)`; the usual guard for denominators.
    pub fn clamp_min(&self, c: T) -> Tensor<T> {
        self.unary(move |x| if x < c { c } else { x }, |a| Op::ClampMin { a, c })
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_scaled(other, T::one())
    }

    /// `scale * (self @ other)` with the scalar folded into the product.
    pub fn matmul_scaled(&self, other: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
        self.check_same_graph(other, "matmul")?;
        let (data, oshape, req) = {
            let nodes = self.graph.inner.nodes.borrow();
            let (na, nb) = (&nodes[self.id], &nodes[other.id]);
            let (ab, m, k) = shape::split_matrix("matmul", &na.shape)?;
            let (bb, k2, n) = shape::split_matrix("matmul", &nb.shape)?;
            if k != k2 {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let obatch = shape::broadcast_shape("matmul", &ab, &bb).map_err(|_| {
                Error::ShapeMismatch { op: "matmul", lhs: na.shape.clone(), rhs: nb.shape.clone() }
            })?;
            let nb_count = numel(&obatch);
            let mut oshape = obatch.clone();
            oshape.push(m);
            oshape.push(n);

            let offsets = batch_offsets(&ab, &bb, &obatch);
            let mut out = vec![T::zero(); nb_count * m * n];
            let work = nb_count * m * n * k;
            if parallel_enabled() && nb_count > 1 && work >= 1 << 15 {
                use rayon::prelude::*;
                out.par_chunks_mut(m * n).zip(offsets.par_iter()).for_each(
                    |(chunk, &(oa, ob))| {
                        kernels::gemm_nn(
                            scale,
                            &na.data[oa * m * k..(oa + 1) * m * k],
                            &nb.data[ob * k * n..(ob + 1) * k * n],
                            chunk,
                            m,
                            k,
                            n,
                        );
                    },
                );
            } else {
                for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                    kernels::gemm_nn(
                        scale,
                        &na.data[oa * m * k..(oa + 1) * m * k],
                        &nb.data[ob * k * n..(ob + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            (out, oshape, na.requires_grad || nb.requires_grad)
        };
        Ok(self.graph.push(oshape, data, req, Op::Matmul { a: self.id, b: other.id, scale }))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        let (data, req) = {
            let nodes = self.graph.inner.nodes.borrow();
            let n = &nodes[self.id];
            if numel(new_shape) != n.data.len() {
                return Err(Error::BadShape {
                    op: "reshape",
                    detail: format!("cannot view {:?} as {new_shape:?}", n.shape),
                });
            }
            (n.data.clone(), n.requires_grad)
        };
        Ok(self.graph.push(new_shape.to_vec(), data, req, Op::Reshape { a: self.id }))
    }

    /// Swaps two axes, materializing the result contiguously.
    pub fn transpose(&self, ax1: usize, ax2: usize) -> Result<Tensor<T>> {
        let (data, oshape, req) = {
            let nodes = self.graph.inner.nodes.borrow();
            let n = &nodes[self.id];
            let rank = n.shape.len();
            check_axis(ax1, rank)?;
            check_axis(ax2, rank)?;
            let mut oshape = n.shape.clone();
            oshape.swap(ax1, ax2);
            let mut map = strides(&n.shape);
            map.swap(ax1, ax2);
            let mut out = vec![T::zero(); n.data.len()];
            walk1(&oshape, &map, |i, src| out[i] = n.data[src]);
            (out, oshape, n.requires_grad)
        };
        Ok(self.graph.push(oshape, data, req, Op::Transpose { a: self.id, ax1, ax2 }))
    }

    /// Materialized broadcast to `target` (right-aligned, 1-expansion).
    pub fn expand(&self, target: &[usize]) -> Result<Tensor<T>> {
        let (data, req) = {
            let nodes = self.graph.inner.nodes.borrow();
            let n = &nodes[self.id];
            if !shape::broadcasts_to(&n.shape, target) {
                return Err(Error::ShapeMismatch {
                    op: "expand",
                    lhs: n.shape.clone(),
                    rhs: target.to_vec(),
                });
            }
            let map = broadcast_strides(&n.shape, target);
            let mut out = vec![T::zero(); numel(target)];
            walk1(target, &map, |i, src| out[i] = n.data[src]);
            (out, n.requires_grad)
        };
        Ok(self.graph.push(target.to_vec(), data, req, Op::Expand { a: self.id }))
    }

    pub fn sum_axis(&self, axis: usize, keep: bool) -> Result<Tensor<T>> {
        self.reduce_axis(axis, keep, false)
    }

    pub fn mean_axis(&self, axis: usize, keep: bool) -> Result<Tensor<T>> {
        self.reduce_axis(axis, keep, true)
    }

    fn reduce_axis(&self, axis: usize, keep: bool, mean: bool) -> Result<Tensor<T>> {
        let (data, kshape, req) = {
            let nodes = self.graph.inner.nodes.borrow();
            let n = &nodes[self.id];
            check_axis(axis, n.shape.len())?;
            let (outer, len, inner) = around_axis(&n.shape, axis);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    let ob = o * inner;
                    for i in 0..inner {
                        out[ob + i] = out[ob + i] + n.data[base + i];
                    }
                }
            }
            if mean {
                let inv = T::one() / T::from_usize(len).unwrap();
                for v in out.iter_mut() {
                    *v = *v * inv;
                }
            }
            let mut kshape = n.shape.clone();
            kshape[axis] = 1;
            (out, kshape, n.requires_grad)
        };
        let op = if mean { Op::MeanAxis { a: self.id, axis } } else { Op::SumAxis { a: self.id, axis } };
        let kept = self.graph.push(kshape.clone(), data, req, op);
        if keep {
            Ok(kept)
        } else {
            let mut squeezed = kshape;
            squeezed.remove(axis);
            kept.reshape(&squeezed)
        }
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let (total, req) = {
            let nodes = self.graph.inner.nodes.borrow();
            let n = &nodes[self.id];
            (n.data.iter().fold(T::zero(), |s, &x| s + x), n.requires_grad)
        };
        Ok(self.graph.push(Vec::new(), vec![total], req, Op::SumAll { a: self.id }))
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let (total, count, req) = {
            let nodes = self.graph.inner.nodes.borrow();
            let n = &nodes[self.id];
            (n.data.iter().fold(T::zero(), |s, &x| s + x), n.data.len(), n.requires_grad)
        };
        let v = total / T::from_usize(count).unwrap();
        Ok(self.graph.push(Vec::new(), vec![v], req, Op::MeanAll { a: self.id }))
    }

    /// Exp-normalization along `axis` with max subtraction. Errors on
    /// non-finite input.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        self.softish(axis, false)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        self.softish(axis, true)
    }

    fn softish(&self, axis: usize, log: bool) -> Result<Tensor<T>> {
        let (data, oshape, req) = {
            let nodes = self.graph.inner.nodes.borrow();
            let n = &nodes[self.id];
            check_axis(axis, n.shape.len())?;
            if n.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { context: "softmax input".into() });
            }
            let (outer, len, inner) = around_axis(&n.shape, axis);
            let mut out = vec![T::zero(); n.data.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut mx = n.data[at(0)];
                    for l in 1..len {
                        let v = n.data[at(l)];
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut denom = T::zero();
                    for l in 0..len {
                        denom = denom + (n.data[at(l)] - mx).exp();
                    }
                    if log {
                        let lse = denom.ln() + mx;
                        for l in 0..len {
                            out[at(l)] = n.data[at(l)] - lse;
                        }
                    } else {
                        let inv = T::one() / denom;
                        for l in 0..len {
                            out[at(l)] = (n.data[at(l)] - mx).exp() * inv;
                        }
                    }
                }
            }
            (out, n.shape.clone(), n.requires_grad)
        };
        let op = if log { Op::LogSoftmax { a: self.id, axis } } else { Op::Softmax { a: self.id, axis } };
        Ok(self.graph.push(oshape, data, req, op))
    }

    /// `len` elements along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let (data, oshape, req) = {
            let nodes = self.graph.inner.nodes.borrow();
            let n = &nodes[self.id];
            check_axis(axis, n.shape.len())?;
            if start + len > n.shape[axis] || len == 0 {
                return Err(Error::BadShape {
                    op: "slice",
                    detail: format!(
                        "range {start}..{} out of bounds for axis {axis} of {:?}",
                        start + len,
                        n.shape
                    ),
                });
            }
            let (outer, alen, inner) = around_axis(&n.shape, axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * alen + start) * inner;
                out.extend_from_slice(&n.data[base..base + len * inner]);
            }
            let mut oshape = n.shape.clone();
            oshape[axis] = len;
            (out, oshape, n.requires_grad)
        };
        Ok(self.graph.push(oshape, data, req, Op::Slice { a: self.id, axis, start }))
    }
}

/// Concatenates tensors along `axis`; shapes must agree elsewhere.
pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(Error::BadShape {
        op: "concat",
        detail: "no tensors given".into(),
    })?;
    for p in parts.iter().skip(1) {
        first.check_same_graph(p, "concat")?;
    }
    let graph = first.graph.clone();
    let (data, oshape, req) = {
        let nodes = graph.inner.nodes.borrow();
        let base_shape = nodes[first.id].shape.clone();
        check_axis(axis, base_shape.len())?;
        let mut total = 0;
        for p in parts {
            let s = &nodes[p.id].shape;
            if s.len() != base_shape.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base_shape[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut oshape = base_shape.clone();
        oshape[axis] = total;
        let (outer, _, inner) = around_axis(&oshape, axis);
        let mut out = Vec::with_capacity(numel(&oshape));
        for o in 0..outer {
            for p in parts {
                let n = &nodes[p.id];
                let plen = n.shape[axis];
                let base = o * plen * inner;
                out.extend_from_slice(&n.data[base..base + plen * inner]);
            }
        }
        let req = parts.iter().any(|p| nodes[p.id].requires_grad);
        (out, oshape, req)
    };
    Ok(graph.push(oshape, data, req, Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis }))
}

/// Per-feature mean and population variance over the sequence axis
/// (next-to-last). For `[N, F]` input, returns `([F], [F])`.
pub fn seq_stats<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::BadShape {
            op: "seq_stats",
            detail: format!("expected rank >= 2, got {:?}", x.shape()),
        });
    }
    let axis = rank - 2;
    let mean_k = x.mean_axis(axis, true)?;
    let diff = x.sub(&mean_k)?;
    let var_k = diff.mul(&diff)?.mean_axis(axis, true)?;
    let mut squeezed = x.shape();
    squeezed.remove(axis);
    Ok((mean_k.reshape(&squeezed)?, var_k.reshape(&squeezed)?))
}

fn batch_offsets(ab: &[usize], bb: &[usize], obatch: &[usize]) -> Vec<(usize, usize)> {
    let sa = broadcast_strides(ab, obatch);
    let sb = broadcast_strides(bb, obatch);
    let mut offsets = Vec::with_capacity(numel(obatch));
    walk2(obatch, &sa, &sb, |_, oa, ob| offsets.push((oa, ob)));
    offsets
}

/// Adds `g` (shaped `oshape`) into `ga` (shaped `tshape`), reducing over
/// broadcast axes.
fn accumulate_reduced<T: Element>(g: &[T], oshape: &[usize], ga: &mut [T], tshape: &[usize], sign: T) {
    if oshape == tshape {
        for (d, &s) in ga.iter_mut().zip(g) {
            *d = *d + sign * s;
        }
    } else {
        let st = broadcast_strides(tshape, oshape);
        walk1(oshape, &st, |i, it| ga[it] = ga[it] + sign * g[i]);
    }
}

/// Replays the backward rule of `node`, accumulating into the gradients
/// of its inputs (all of which precede it on the tape).
pub(crate) fn backward_node<T: Element>(node: &Node<T>, before: &mut [Node<T>]) {
    let g = node.grad.as_ref().expect("backward_node needs an upstream gradient");
    let oshape = &node.shape;
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign_b = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
            if let Some(mut ga) = take_grad(before, *a) {
                accumulate_reduced(g, oshape, &mut ga, &before[*a].shape.clone(), T::one());
                put_grad(before, *a, ga);
            }
            if let Some(mut gb) = take_grad(before, *b) {
                accumulate_reduced(g, oshape, &mut gb, &before[*b].shape.clone(), sign_b);
                put_grad(before, *b, gb);
            }
        }
        Op::Mul { a, b } => {
            if let Some(mut ga) = take_grad(before, *a) {
                let (ashape, bshape) = (&before[*a].shape, &before[*b].shape);
                let bd = &before[*b].data;
                if ashape == oshape && bshape == oshape {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bd[i];
                    }
                } else {
                    let sa = broadcast_strides(ashape, oshape);
                    let sb = broadcast_strides(bshape, oshape);
                    walk2(oshape, &sa, &sb, |i, ia, ib| ga[ia] = ga[ia] + g[i] * bd[ib]);
                }
                put_grad(before, *a, ga);
            }
            if let Some(mut gb) = take_grad(before, *b) {
                let (ashape, bshape) = (&before[*a].shape, &before[*b].shape);
                let ad = &before[*a].data;
                if ashape == oshape && bshape == oshape {
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * ad[i];
                    }
                } else {
                    let sa = broadcast_strides(ashape, oshape);
                    let sb = broadcast_strides(bshape, oshape);
                    walk2(oshape, &sa, &sb, |i, ia, ib| gb[ib] = gb[ib] + g[i] * ad[ia]);
                }
                put_grad(before, *b, gb);
            }
        }
        Op::Div { a, b } => {
            if let Some(mut ga) = take_grad(before, *a) {
                let (ashape, bshape) = (&before[*a].shape, &before[*b].shape);
                let bd = &before[*b].data;
                let sa = broadcast_strides(ashape, oshape);
                let sb = broadcast_strides(bshape, oshape);
                walk2(oshape, &sa, &sb, |i, ia, ib| ga[ia] = ga[ia] + g[i] / bd[ib]);
                put_grad(before, *a, ga);
            }
            if let Some(mut gb) = take_grad(before, *b) {
                let (ashape, bshape) = (&before[*a].shape, &before[*b].shape);
                let (ad, bd) = (&before[*a].data, &before[*b].data);
                let sa = broadcast_strides(ashape, oshape);
                let sb = broadcast_strides(bshape, oshape);
                walk2(oshape, &sa, &sb, |i, ia, ib| {
                    gb[ib] = gb[ib] - g[i] * ad[ia] / (bd[ib] * bd[ib]);
                });
                put_grad(before, *b, gb);
            }
        }
        Op::Scale { a, c } => {
            if let Some(mut ga) = take_grad(before, *a) {
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * *c;
                }
                put_grad(before, *a, ga);
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if let Some(mut ga) = take_grad(before, *a) {
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i];
                }
                put_grad(before, *a, ga);
            }
        }
        Op::Exp { a } => {
            if let Some(mut ga) = take_grad(before, *a) {
                let y = &node.data;
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * y[i];
                }
                put_grad(before, *a, ga);
            }
        }
        Op::Tanh { a } => {
            if let Some(mut ga) = take_grad(before, *a) {
                let y = &node.data;
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * (T::one() - y[i] * y[i]);
                }
                put_grad(before, *a, ga);
            }
        }
        Op::Gelu { a } => {
            if let Some(mut ga) = take_grad(before, *a) {
                let x = &before[*a].data;
                let c0 = T::from_f64(GELU_C0).unwrap();
                let c1 = T::from_f64(GELU_C1).unwrap();
                let half = T::from_f64(0.5).unwrap();
                let three = T::from_f64(3.0).unwrap();
                for i in 0..g.len() {
                    let xi = x[i];
                    let t = (c0 * (xi + c1 * xi * xi * xi)).tanh();
                    let d = half * (T::one() + t)
                        + half * xi * (T::one() - t * t) * c0 * (T::one() + three * c1 * xi * xi);
                    ga[i] = ga[i] + g[i] * d;
                }
                put_grad(before, *a, ga);
            }
        }
        Op::Sqrt { a } => {
            if let Some(mut ga) = take_grad(before, *a) {
                let y = &node.data;
                let half = T::from_f64(0.5).unwrap();
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * half / y[i];
                }
                put_grad(before, *a, ga);
            }
        }
        Op::Abs { a } => {
            if let Some(mut ga) = take_grad(before, *a) {
                let x = &before[*a].data;
                for i in 0..g.len() {
                    let s = if x[i] > T::zero() {
                        T::one()
                    } else if x[i] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    ga[i] = ga[i] + g[i] * s;
                }
                put_grad(before, *a, ga);
            }
        }
        Op::ClampMin { a, c } => {
            if let Some(mut ga) = take_grad(before, *a) {
                let x = &before[*a].data;
                for i in 0..g.len() {
                    if x[i] > *c {
                        ga[i] = ga[i] + g[i];
                    }
                }
                put_grad(before, *a, ga);
            }
        }
        Op::Matmul { a, b, scale } => {
            let (ashape, bshape) = (before[*a].shape.clone(), before[*b].shape.clone());
            let (ab, m, k) = shape::split_matrix("matmul", &ashape).expect("validated");
            let (bb, _, n) = shape::split_matrix("matmul", &bshape).expect("validated");
            let obatch = &oshape[..oshape.len() - 2];
            let offsets = batch_offsets(&ab, &bb, obatch);
            if let Some(mut ga) = take_grad(before, *a) {
                let bd = &before[*b].data;
                for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                    kernels::gemm_nt(
                        *scale,
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bd[ob * k * n..(ob + 1) * k * n],
                        &mut ga[oa * m * k..(oa + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                put_grad(before, *a, ga);
            }
            if let Some(mut gb) = take_grad(before, *b) {
                let ad = &before[*a].data;
                for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                    kernels::gemm_tn(
                        *scale,
                        &ad[oa * m * k..(oa + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[ob * k * n..(ob + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                put_grad(before, *b, gb);
            }
        }
        Op::Transpose { a, ax1, ax2 } => {
            if let Some(mut ga) = take_grad(before, *a) {
                let mut map = strides(&before[*a].shape);
                map.swap(*ax1, *ax2);
                walk1(oshape, &map, |i, src| ga[src] = ga[src] + g[i]);
                put_grad(before, *a, ga);
            }
        }
        Op::Expand { a } => {
            if let Some(mut ga) = take_grad(before, *a) {
                accumulate_reduced(g, oshape, &mut ga, &before[*a].shape.clone(), T::one());
                put_grad(before, *a, ga);
            }
        }
        Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
            if let Some(mut ga) = take_grad(before, *a) {
                let (outer, len, inner) = around_axis(&before[*a].shape, *axis);
                let w = if matches!(node.op, Op::MeanAxis { .. }) {
                    T::one() / T::from_usize(len).unwrap()
                } else {
                    T::one()
                };
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        let gb = o * inner;
                        for i in 0..inner {
                            ga[base + i] = ga[base + i] + g[gb + i] * w;
                        }
                    }
                }
                put_grad(before, *a, ga);
            }
        }
        Op::SumAll { a } | Op::MeanAll { a } => {
            if let Some(mut ga) = take_grad(before, *a) {
                let w = if matches!(node.op, Op::MeanAll { .. }) {
                    T::one() / T::from_usize(ga.len()).unwrap()
                } else {
                    T::one()
                };
                let gv = g[0] * w;
                for v in ga.iter_mut() {
                    *v = *v + gv;
                }
                put_grad(before, *a, ga);
            }
        }
        Op::Softmax { a, axis } => {
            if let Some(mut ga) = take_grad(before, *a) {
                let y = &node.data;
                let (outer, len, inner) = around_axis(oshape, *axis);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut s = T::zero();
                        for l in 0..len {
                            s = s + g[at(l)] * y[at(l)];
                        }
                        for l in 0..len {
                            let j = at(l);
                            ga[j] = ga[j] + y[j] * (g[j] - s);
                        }
                    }
                }
                put_grad(before, *a, ga);
            }
        }
        Op::LogSoftmax { a, axis } => {
            if let Some(mut ga) = take_grad(before, *a) {
                let y = &node.data;
                let (outer, len, inner) = around_axis(oshape, *axis);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut s = T::zero();
                        for l in 0..len {
                            s = s + g[at(l)];
                        }
                        for l in 0..len {
                            let j = at(l);
                            ga[j] = ga[j] + g[j] - y[j].exp() * s;
                        }
                    }
                }
                put_grad(before, *a, ga);
            }
        }
        Op::Slice { a, axis, start } => {
            if let Some(mut ga) = take_grad(before, *a) {
                let (outer, alen, inner) = around_axis(&before[*a].shape, *axis);
                let len = oshape[*axis];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * alen + start) * inner;
                    for i in 0..len * inner {
                        ga[dst + i] = ga[dst + i] + g[src + i];
                    }
                }
                put_grad(before, *a, ga);
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, olen, inner) = around_axis(oshape, *axis);
            let mut off = 0;
            for &p in parts {
                let plen = before[p].shape[*axis];
                if let Some(mut gp) = take_grad(before, p) {
                    for o in 0..outer {
                        let src = (o * olen + off) * inner;
                        let dst = o * plen * inner;
                        for i in 0..plen * inner {
                            gp[dst + i] = gp[dst + i] + g[src + i];
                        }
                    }
                    put_grad(before, p, gp);
                }
                off += plen;
            }
        }
    }
}
