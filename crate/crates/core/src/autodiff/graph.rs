//! Tape of primitive tensor operations with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the tape is topologically sorted
//! by construction and `backward` is a single reverse sweep. Broadcasting is
//! never implicit: bias-like additions go through [`Graph::expand`] first.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, batched: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Expand(Var),
    Concat(Vec<Var>, usize),
    Narrow { a: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Softmax(Var),
    Gelu { a: Var, tanh: Vec<T> },
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Independent graphs share nothing and may live on
/// different threads.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (with `shape`) into a new buffer laid out as `shape` permuted
/// by `axes`.
fn permute_data<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // Trailing axes left in place form contiguous runs.
    let mut keep = rank;
    while keep > 0 && axes[keep - 1] == keep - 1 {
        keep -= 1;
    }
    let run: usize = shape[keep..].iter().product();
    let outer_shape = &out_shape[..keep];
    let outer_strides: Vec<usize> = axes[..keep].iter().map(|&a| in_strides[a]).collect();
    if keep == 0 {
        return src.to_vec();
    }
    // Walk all but the innermost moved axis with an index, the innermost
    // one with a plain stride.
    let (inner_len, inner_stride) = (outer_shape[keep - 1], outer_strides[keep - 1]);
    let rows: usize = outer_shape[..keep - 1].iter().product();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; keep - 1];
    for _ in 0..rows {
        let base: usize = idx.iter().zip(&outer_strides).map(|(i, s)| i * s).sum();
        if run == 1 {
            out.extend((0..inner_len).map(|j| src[base + j * inner_stride]));
        } else {
            for j in 0..inner_len {
                let o = base + j * inner_stride;
                out.extend_from_slice(&src[o..o + run]);
            }
        }
        for d in (0..keep - 1).rev() {
            idx[d] += 1;
            if idx[d] < outer_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Visits a broadcast from `in_shape` to `out_shape` as contiguous runs:
/// `f(src, dst, len)` where `src` is the start of a run of `len` source values
/// (or a single value repeated `len` times when the innermost axis is
/// broadcast, signalled by `repeat = true`).
fn broadcast_runs(in_shape: &[usize], out_shape: &[usize], mut f: impl FnMut(usize, usize, usize, bool)) {
    let rank = out_shape.len();
    let in_strides = strides(in_shape);
    // Trailing axes that are not broadcast form contiguous runs.
    let mut k = rank;
    while k > 0 && in_shape[k - 1] == out_shape[k - 1] {
        k -= 1;
    }
    let (run, repeat, outer_rank) = if k == rank {
        // Innermost axis is broadcast: repeat one value along it.
        (out_shape[rank - 1], true, rank - 1)
    } else {
        (out_shape[k..].iter().product::<usize>(), false, k)
    };
    let eff: Vec<usize> = (0..outer_rank)
        .map(|i| if in_shape[i] == 1 { 0 } else { in_strides[i] })
        .collect();
    let outer: usize = out_shape[..outer_rank].iter().product();
    let mut idx = vec![0usize; outer_rank];
    let mut src = 0usize;
    for o in 0..outer {
        f(src, o * run, run, repeat);
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            src += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// tanh of the GELU argument for every element, through one exponential.
fn gelu_tanh<T: Scalar>(x: &[T]) -> Vec<T> {
    let us: Vec<T> = x.iter().map(|&v| T::of(GELU_C) * (v + T::of(GELU_K) * v * v * v)).collect();
    let mut e: Vec<T> = us.iter().map(|u| T::of(-2.0) * u.abs()).collect();
    T::exp_slice(&mut e);
    e.iter().zip(&us).map(|(&e, &u)| ((T::one() - e) / (T::one() + e)).copysign(u)).collect()
}

fn gelu_grad<T: Scalar>(x: T, th: T) -> T {
    let half = T::of(0.5);
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Input tensor. Gradients are reported for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// `[.., m, k] × [k, n]` (shared right operand) or `[B.., m, k] × [B.., k,
    /// n]` with identical leading batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let batched = sb.len() > 2;
        let batch: usize = if batched {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(err());
            }
            sa[..sa.len() - 2].iter().product()
        } else {
            1
        };
        let rows = if batched { m } else { sa[..sa.len() - 1].iter().product() };
        let mut out = vec![T::zero(); batch * rows * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                unsafe {
                    T::gemm(
                        rows,
                        k,
                        n,
                        T::one(),
                        av.as_ptr().add(i * rows * k),
                        k as isize,
                        1,
                        bv.as_ptr().add(i * k * n),
                        n as isize,
                        1,
                        T::zero(),
                        out.as_mut_ptr().add(i * rows * n),
                        n as isize,
                        1,
                    );
                }
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, batched }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, node: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ct = T::of(c);
        let data = self.value(a).data().iter().map(|&x| x * ct).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, c), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.value(a).data().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(a), rg))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn transpose(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("transpose", format!("{shape:?} by axes {axes:?}")));
        }
        let data = permute_data(self.value(a).data(), &shape, axes);
        let out_shape = axes.iter().map(|&x| shape[x]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(a, axes.to_vec()), rg))
    }

    /// Broadcasts size-1 axes of `a` to `shape` (same rank).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != shape.len() || sa.iter().zip(shape).any(|(&i, &o)| i != o && i != 1) {
            return Err(Error::shape("expand", format!("{sa:?} -> {shape:?}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(shape.iter().product());
        broadcast_runs(&sa, shape, |s, _, len, repeat| {
            if repeat {
                data.extend(std::iter::repeat_n(src[s], len));
            } else {
                data.extend_from_slice(&src[s..s + len]);
            }
        });
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Expand(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
                return Err(Error::shape("concat", format!("{shapes:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(Error::shape("narrow", format!("{sa:?} axis {axis} range {start}..{}", start + len)));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sa[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Narrow { a, axis, start }, rg))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let dim = *self.shape(a).get(axis).ok_or_else(|| Error::shape("split", format!("axis {axis}")))?;
        if sizes.iter().sum::<usize>() != dim {
            return Err(Error::shape("split", format!("sizes {sizes:?} for extent {dim}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(src.len() / d.max(1));
        for row in src.chunks(d) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|v| T::of((v.as_f64() - mean) * is)));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::LayerNorm { a, inv_std }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("softmax", "rank 0"))?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.iter_mut().for_each(|v| *v = *v - max);
            T::exp_slice(row);
            let total: T = row.iter().copied().sum();
            let inv = T::one() / total;
            row.iter_mut().for_each(|v| *v = *v * inv);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax(a), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let tanh = gelu_tanh(x);
        let half = T::of(0.5);
        let data = x.iter().zip(&tanh).map(|(&v, &th)| half * v * (T::one() + th)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        let tanh = if rg { tanh } else { Vec::new() };
        self.push(Tensor::from_parts(shape, data), Op::Gelu { a, tanh }, rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s: T = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let n = T::of(va.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg))
    }

    /// Reverse sweep from a scalar `loss`. The graph is left untouched, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backprop(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.value(v).len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, batched } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (k, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
                let (batch, rows) = if *batched {
                    (sa[..sa.len() - 2].iter().product(), sa[sa.len() - 2])
                } else {
                    (1, sa[..sa.len() - 1].iter().product())
                };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = G·Bᵀ
                self.accumulate_with(grads, *a, |ga| {
                    for i in 0..batch {
                        unsafe {
                            T::gemm(
                                rows,
                                n,
                                k,
                                T::one(),
                                g.as_ptr().add(i * rows * n),
                                n as isize,
                                1,
                                bv.as_ptr().add(i * k * n),
                                1,
                                n as isize,
                                T::one(),
                                ga.as_mut_ptr().add(i * rows * k),
                                k as isize,
                                1,
                            );
                        }
                    }
                });
                // dB = Aᵀ·G
                self.accumulate_with(grads, *b, |gb| {
                    let bstride = if *batched { k * n } else { 0 };
                    for i in 0..batch {
                        unsafe {
                            T::gemm(
                                k,
                                rows,
                                n,
                                T::one(),
                                av.as_ptr().add(i * rows * k),
                                1,
                                k as isize,
                                g.as_ptr().add(i * rows * n),
                                n as isize,
                                1,
                                T::one(),
                                gb.as_mut_ptr().add(i * bstride),
                                n as isize,
                                1,
                            );
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                self.accumulate(grads, *b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(a, c) => {
                let c = T::of(*c);
                self.accumulate(grads, *a, g.iter().map(|&v| v * c).collect());
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Permute(a, axes) => {
                let back = permute_data(g, out.shape(), &inverse_axes(axes));
                self.accumulate(grads, *a, back);
            }
            Op::Expand(a) => {
                self.accumulate_with(grads, *a, |ga| {
                    broadcast_runs(self.shape(*a), out.shape(), |s, d, len, repeat| {
                        if repeat {
                            ga[s] += g[d..d + len].iter().copied().sum::<T>();
                        } else {
                            for (x, &y) in ga[s..s + len].iter_mut().zip(&g[d..d + len]) {
                                *x += y;
                            }
                        }
                    });
                });
            }
            Op::Concat(parts, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.rg(p) {
                        let mut piece = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            piece.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        self.accumulate(grads, p, piece);
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let sa = self.shape(*a);
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let len = out.shape()[*axis] * inner;
                let full = sa[*axis] * inner;
                self.accumulate_with(grads, *a, |ga| {
                    for o in 0..outer {
                        let dst = o * full + start * inner;
                        for (d, &s) in ga[dst..dst + len].iter_mut().zip(&g[o * len..(o + 1) * len]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::LayerNorm { a, inv_std } => {
                let d = *out.shape().last().unwrap();
                let y = out.data();
                let mut ga = Vec::with_capacity(y.len());
                for (r, (yr, gr)) in y.chunks(d).zip(g.chunks(d)).enumerate() {
                    let mg = gr.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(g, y)| g.as_f64() * y.as_f64()).sum::<f64>() / d as f64;
                    let is = inv_std[r];
                    ga.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(g, y)| T::of(is * (g.as_f64() - mg - y.as_f64() * mgy))),
                    );
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let d = *out.shape().last().unwrap();
                let y = out.data();
                let mut ga = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    ga.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu { a, tanh } => {
                let x = self.value(*a).data();
                let ga = x.iter().zip(tanh).zip(g).map(|((&x, &th), &g)| g * gelu_grad(x, th)).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let c = T::of(2.0) * g[0] / T::of(va.len() as f64);
                let ga: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| c * (x - y)).collect();
                if self.rg(*b) {
                    self.accumulate(grads, *b, ga.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}
