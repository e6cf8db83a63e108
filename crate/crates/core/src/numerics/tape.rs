//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse creation order and
//! accumulates adjoints into every node that (transitively) depends on a
//! parameter leaf. Constants never receive gradients.

use std::f64::consts::PI;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{strides, Tensor};
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Concat(Vec<Var>, usize),
    Sum(Var, Vec<usize>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Expand(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Conv {
        x: Var,
        kernel: Var,
        dilation: usize,
    },
    MixtureNll {
        h: Var,
        log_gamma: Var,
        mu: Var,
        sigma2: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// How the second operand of a binary op maps onto the first one's shape.
enum Broadcast {
    Same,
    /// `b` repeats every `len` elements of `a`.
    Suffix(usize),
    /// Explicit `a` offset → `b` offset table.
    Table(Vec<usize>),
}

impl Broadcast {
    fn plan(a: &[usize], b: &[usize]) -> Option<Self> {
        if a == b {
            return Some(Broadcast::Same);
        }
        if b.len() > a.len() {
            return None;
        }
        let pad = a.len() - b.len();
        let padded: Vec<usize> = std::iter::repeat(1)
            .take(pad)
            .chain(b.iter().copied())
            .collect();
        if padded.iter().zip(a).any(|(&p, &q)| p != q && p != 1) {
            return None;
        }
        let first_real = padded.iter().position(|&d| d != 1).unwrap_or(padded.len());
        if padded[first_real..] == a[first_real..] {
            let len = a[first_real..].iter().product::<usize>().max(1);
            return Some(Broadcast::Suffix(len));
        }
        Some(Broadcast::Table(expand_table(&padded, a)))
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(len) => i % len,
            Broadcast::Table(t) => t[i],
        }
    }
}

/// For every offset of `target`, the offset into a same-rank `source` whose
/// unit extents are broadcast.
fn expand_table(source: &[usize], target: &[usize]) -> Vec<usize> {
    let src_strides = strides(source);
    let eff: Vec<usize> = source
        .iter()
        .zip(&src_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let len: usize = target.iter().product();
    let mut table = Vec::with_capacity(len);
    let mut index = vec![0usize; target.len()];
    let mut off = 0usize;
    for _ in 0..len {
        table.push(off);
        for axis in (0..target.len()).rev() {
            index[axis] += 1;
            off += eff[axis];
            if index[axis] < target[axis] {
                break;
            }
            off -= eff[axis] * index[axis];
            index[axis] = 0;
        }
    }
    table
}

/// Split `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Recorded computation graph for one scalar objective.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

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

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        let plan = Broadcast::plan(av.shape(), bv.shape())
            .ok_or_else(|| Error::dim(name, av.shape(), bv.shape()))?;
        let (ad, bd) = (av.data(), bv.data());
        let data = (0..ad.len()).map(|i| f(ad[i], bd[plan.index(i)])).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok((value, self.rg(a) || self.rg(b)))
    }

    /// `a + b`, where `b` broadcasts onto `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `a - b`, where `b` broadcasts onto `a`'s shape.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise `a ⊙ b`, where `b` broadcasts onto `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn shift(&mut self, x: Var, offset: f64) -> Var {
        self.unary(x, Op::Shift(x), |v| v + offset)
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    /// `ln σ(x)` evaluated without overflow for any finite `x`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::LogSigmoid(x), log_sigmoid)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Clamp into `[lo, hi]`; gradient passes through strictly inside the bounds.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// `a[..., p, q] · b[q, r] -> [..., p, r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(Error::dim("matmul", ash, bsh));
        }
        let q = bsh[0];
        let r = bsh[1];
        let rows = av.len() / q;
        let mut out = vec![0.0; rows * r];
        gemm_nn(av.data(), bv.data(), &mut out, rows, q, r);
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = r;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Batched product over identical leading extents:
    /// `a[B.., p, q] · b[B.., q, r]`, or `· b[B.., r, q]ᵀ` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        let n = ash.len();
        if n < 3 || bsh.len() != n || ash[..n - 2] != bsh[..n - 2] {
            return Err(Error::dim("batch_matmul", ash, bsh));
        }
        let (p, q) = (ash[n - 2], ash[n - 1]);
        let (bq, r) = if transpose_b {
            (bsh[n - 1], bsh[n - 2])
        } else {
            (bsh[n - 2], bsh[n - 1])
        };
        if bq != q {
            return Err(Error::dim("batch_matmul", ash, bsh));
        }
        let batch: usize = ash[..n - 2].iter().product();
        let mut out = vec![0.0; batch * p * r];
        for i in 0..batch {
            let ab = &av.data()[i * p * q..(i + 1) * p * q];
            let bb = &bv.data()[i * q * r..(i + 1) * q * r];
            let ob = &mut out[i * p * r..(i + 1) * p * r];
            if transpose_b {
                gemm_nt(ab, bb, ob, p, q, r);
            } else {
                gemm_nn(ab, bb, ob, p, q, r);
            }
        }
        let mut shape = ash[..n - 2].to_vec();
        shape.extend([p, r]);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::BatchMatMul { a, b, transpose_b }, rg))
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.value(x).rank() {
            return Err(Error::Shape(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let value = softmax_values(self.value(x), axis, false);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let value = softmax_values(self.value(x), axis, true);
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x, axis), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        self.check_axis(*first, axis, "concat")?;
        let base = self.shape(*first).to_vec();
        let mut extent = 0;
        for &p in parts {
            let sh = self.shape(p);
            let compatible = sh.len() == base.len()
                && sh
                    .iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, sh));
            }
            extent += sh[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Sum over `axes`, removing them. Reducing every axis yields shape `[1]`.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::Shape(format!(
                "sum: axes {axes:?} invalid for {shape:?}"
            )));
        }
        let (out_shape, table) = reduce_table(&shape, &axes);
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_len];
        for (i, &v) in self.value(x).data().iter().enumerate() {
            out[table[i]] += v;
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Sum(x, axes), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.sum_axes(x, &axes).expect("all axes are valid")
    }

    /// Mean over `axes`, removing them.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        let s = self.sum_axes(x, axes)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape(format!(
                "permute {perm:?} invalid for {shape:?}"
            )));
        }
        let value = permute_values(self.value(x), perm);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Broadcast unit extents of `x` up to `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &t)| s != t && s != 1) {
            return Err(Error::dim("expand", &src, shape));
        }
        let table = expand_table(&src, shape);
        let xd = self.value(x).data();
        let data = table.iter().map(|&j| xd[j]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Expand(x), rg))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "narrow")?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow {start}..{} out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(&xd[base + start * inner..base + (start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    /// Valid dilated causal convolution along the leading (time) axis.
    ///
    /// `x` is `[T, ..., C_in]`, `kernel` is `[k, C_in, C_out]`; every middle
    /// position is convolved independently. Output step `t` reads input steps
    /// `t, t + d, ..., t + (k-1)d`, so it ends at input step `t + (k-1)d` and
    /// never sees anything later.
    pub fn dilated_causal_conv(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (xs, ks) = (xv.shape(), kv.shape());
        if xs.len() < 2 || ks.len() != 3 || ks[1] != xs[xs.len() - 1] {
            return Err(Error::dim("dilated_causal_conv", xs, ks));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be positive".into()));
        }
        let (taps, c_in, c_out) = (ks[0], ks[1], ks[2]);
        let span = (taps - 1) * dilation;
        let steps = xs[0];
        if steps <= span {
            return Err(Error::Config(format!(
                "convolution window {} (kernel {taps}, dilation {dilation}) does not fit {steps} time steps",
                span + 1
            )));
        }
        let out_steps = steps - span;
        let sites: usize = xs[1..xs.len() - 1].iter().product();
        let rows = out_steps * sites;
        let mut out = vec![0.0; rows * c_out];
        for j in 0..taps {
            let start = j * dilation * sites * c_in;
            let xs_tap = &xv.data()[start..start + rows * c_in];
            let k_tap = &kv.data()[j * c_in * c_out..(j + 1) * c_in * c_out];
            gemm_nn(xs_tap, k_tap, &mut out, rows, c_in, c_out);
        }
        let mut shape = xs.to_vec();
        shape[0] = out_steps;
        *shape.last_mut().unwrap() = c_out;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                kernel,
                dilation,
            },
            rg,
        ))
    }

    /// Negative log-likelihood of the rows of `h` (`[G, D]`) under a
    /// diagonal Gaussian mixture, summed over rows:
    ///
    /// `-Σ_g log Σ_k exp(log_gamma_k) · N(h_g | mu_k, diag(sigma2_k))`
    ///
    /// with the inner sum in log space. `log_gamma` is `[K]`, `mu` and
    /// `sigma2` are `[K, D]`, and `sigma2` must be strictly positive.
    pub fn mixture_nll(&mut self, h: Var, log_gamma: Var, mu: Var, sigma2: Var) -> Result<Var> {
        let (hs, gs, ms, ss) = (
            self.shape(h),
            self.shape(log_gamma),
            self.shape(mu),
            self.shape(sigma2),
        );
        if hs.len() != 2 || ms.len() != 2 || ms != ss || gs != [ms[0]] || hs[1] != ms[1] {
            return Err(Error::Dimension {
                op: "mixture_nll",
                lhs: hs.to_vec(),
                rhs: ms.to_vec(),
            });
        }
        if let Some(bad) = self.value(sigma2).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "mixture_nll",
                detail: format!("variance {bad} is not positive"),
            });
        }
        let scores = mixture_scores(
            self.value(h),
            self.value(log_gamma),
            self.value(mu),
            self.value(sigma2),
        );
        let k = ms[0];
        let nll: f64 = -scores.chunks(k).map(log_sum_exp).sum::<f64>();
        let rg = [h, log_gamma, mu, sigma2].iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::scalar(nll),
            Op::MixtureNll {
                h,
                log_gamma,
                mu,
                sigma2,
            },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let plan =
                    Broadcast::plan(self.shape(*a), self.shape(*b)).expect("checked in forward");
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[plan.index(i)] += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let plan =
                    Broadcast::plan(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let (ad, bd) = (val(*a), val(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i] += gi * bd[plan.index(i)];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[plan.index(i)] += gi * ad[i];
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * f);
                }
            }
            Op::Shift(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Relu(x) => {
                self.pointwise(grads, *x, g, |xi, _| if xi > 0.0 { 1.0 } else { 0.0 }, node)
            }
            Op::Tanh(x) => self.pointwise(grads, *x, g, |_, yi| 1.0 - yi * yi, node),
            Op::Sigmoid(x) => self.pointwise(grads, *x, g, |_, yi| yi * (1.0 - yi), node),
            Op::Exp(x) => self.pointwise(grads, *x, g, |_, yi| yi, node),
            Op::Log(x) => self.pointwise(grads, *x, g, |xi, _| 1.0 / xi, node),
            Op::LogSigmoid(x) => self.pointwise(grads, *x, g, |xi, _| sigmoid(-xi), node),
            Op::Square(x) => self.pointwise(grads, *x, g, |xi, _| 2.0 * xi, node),
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.pointwise(
                    grads,
                    *x,
                    g,
                    |xi, _| if xi > lo && xi < hi { 1.0 } else { 0.0 },
                    node,
                )
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (q, r) = (bv.shape()[0], bv.shape()[1]);
                let rows = av.len() / q;
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nt(g, bv.data(), ga, rows, r, q);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn(av.data(), g, gb, rows, q, r);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.rank();
                let (p, q) = (av.shape()[n - 2], av.shape()[n - 1]);
                let r = node.value.shape()[n - 1];
                let batch = av.len() / (p * q);
                let (ad, bd) = (av.data(), bv.data());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..batch {
                        let gi = &g[i * p * r..(i + 1) * p * r];
                        let bb = &bd[i * q * r..(i + 1) * q * r];
                        let out = &mut ga[i * p * q..(i + 1) * p * q];
                        if *transpose_b {
                            // b is [r, q]
                            gemm_nn(gi, bb, out, p, r, q);
                        } else {
                            gemm_nt(gi, bb, out, p, r, q);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..batch {
                        let gi = &g[i * p * r..(i + 1) * p * r];
                        let ab = &ad[i * p * q..(i + 1) * p * q];
                        let out = &mut gb[i * q * r..(i + 1) * q * r];
                        if *transpose_b {
                            // d b[r, q] = gᵀ[r, p] · a[p, q]
                            gemm_tn(gi, ab, out, p, r, q);
                        } else {
                            gemm_tn(ab, gi, out, p, q, r);
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, extent, inner) = split_axis(node.value.shape(), *axis);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * extent + j) * inner + i;
                            let dot: f64 = (0..extent).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..extent {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x, axis) => {
                let y = node.value.data();
                let (outer, extent, inner) = split_axis(node.value.shape(), *axis);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * extent + j) * inner + i;
                            let total: f64 = (0..extent).map(|j| g[at(j)]).sum();
                            for j in 0..extent {
                                gx[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let extent = node.value.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[*axis] * inner;
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = o * extent * inner + offset;
                            for (d, s) in gp[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(&g[src..src + block])
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += block;
                }
            }
            Op::Sum(x, axes) => {
                let (_, table) = reduce_table(self.shape(*x), axes);
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, gi) in gx.iter_mut().enumerate() {
                        *gi += g[table[i]];
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                let back = permute_values(&gt, &inverse);
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(back.data()).for_each(|(a, b)| *a += b);
                }
            }
            Op::Expand(x) => {
                let table = expand_table(self.shape(*x), node.value.shape());
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &j) in table.iter().enumerate() {
                        gx[j] += g[i];
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, extent, inner) = split_axis(&shape, *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let dst = o * extent * inner + start * inner;
                        let src = o * len * inner;
                        for (d, s) in gx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::Conv {
                x,
                kernel,
                dilation,
            } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (taps, c_in, c_out) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                let out_steps = node.value.shape()[0];
                let sites: usize = xv.shape()[1..xv.rank() - 1].iter().product();
                let rows = out_steps * sites;
                let (kd, xd) = (kv.data(), xv.data());
                if let Some(gx) = self.slot(grads, *x) {
                    for j in 0..taps {
                        let start = j * dilation * sites * c_in;
                        let k_tap = &kd[j * c_in * c_out..(j + 1) * c_in * c_out];
                        gemm_nt(
                            g,
                            k_tap,
                            &mut gx[start..start + rows * c_in],
                            rows,
                            c_out,
                            c_in,
                        );
                    }
                }
                if let Some(gk) = self.slot(grads, *kernel) {
                    for j in 0..taps {
                        let start = j * dilation * sites * c_in;
                        let x_tap = &xd[start..start + rows * c_in];
                        gemm_tn(
                            x_tap,
                            g,
                            &mut gk[j * c_in * c_out..(j + 1) * c_in * c_out],
                            rows,
                            c_in,
                            c_out,
                        );
                    }
                }
            }
            Op::MixtureNll {
                h,
                log_gamma,
                mu,
                sigma2,
            } => {
                self.mixture_backward(g[0], *h, *log_gamma, *mu, *sigma2, grads);
            }
        }
    }

    fn pointwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        g: &[f64],
        deriv: impl Fn(f64, f64) -> f64,
        node: &Node,
    ) {
        let xd = self.value(x).data();
        let yd = node.value.data();
        let Some(gx) = self.slot(grads, x) else {
            return;
        };
        for i in 0..gx.len() {
            gx[i] += g[i] * deriv(xd[i], yd[i]);
        }
    }

    fn mixture_backward(
        &self,
        upstream: f64,
        h: Var,
        log_gamma: Var,
        mu: Var,
        sigma2: Var,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (hv, lg, mv, sv) = (
            self.value(h),
            self.value(log_gamma),
            self.value(mu),
            self.value(sigma2),
        );
        let (rows, dim) = (hv.shape()[0], hv.shape()[1]);
        let k = lg.len();
        let scores = mixture_scores(hv, lg, mv, sv);
        let (hd, md, sd) = (hv.data(), mv.data(), sv.data());
        let mut d_h = vec![0.0; rows * dim];
        let mut d_lg = vec![0.0; k];
        let mut d_mu = vec![0.0; k * dim];
        let mut d_s2 = vec![0.0; k * dim];
        for r in 0..rows {
            let row = &scores[r * k..(r + 1) * k];
            let lse = log_sum_exp(row);
            for c in 0..k {
                // d(nll)/d(score_rc) = -responsibility
                let w = -(row[c] - lse).exp() * upstream;
                d_lg[c] += w;
                for d in 0..dim {
                    let s2 = sd[c * dim + d];
                    let diff = hd[r * dim + d] - md[c * dim + d];
                    d_h[r * dim + d] += w * (-diff / s2);
                    d_mu[c * dim + d] += w * (diff / s2);
                    d_s2[c * dim + d] += w * (-0.5 / s2 + 0.5 * diff * diff / (s2 * s2));
                }
            }
        }
        for (v, d) in [(h, d_h), (log_gamma, d_lg), (mu, d_mu), (sigma2, d_s2)] {
            if let Some(gv) = self.slot(grads, v) {
                gv.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Per-row, per-component joint log scores `log γ_k + log N(h_g | μ_k, σ²_k)`, `[G, K]` flattened.
fn mixture_scores(h: &Tensor, log_gamma: &Tensor, mu: &Tensor, sigma2: &Tensor) -> Vec<f64> {
    let (rows, dim) = (h.shape()[0], h.shape()[1]);
    let k = log_gamma.len();
    let (hd, md, sd) = (h.data(), mu.data(), sigma2.data());
    let norm: Vec<f64> = (0..k)
        .map(|c| {
            (0..dim)
                .map(|d| -0.5 * (2.0 * PI * sd[c * dim + d]).ln())
                .sum::<f64>()
        })
        .collect();
    let mut scores = Vec::with_capacity(rows * k);
    for r in 0..rows {
        for c in 0..k {
            let mut quad = 0.0;
            for d in 0..dim {
                let diff = hd[r * dim + d] - md[c * dim + d];
                quad += diff * diff / (2.0 * sd[c * dim + d]);
            }
            scores.push(log_gamma.data()[c] + norm[c] - quad);
        }
    }
    scores
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_values(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, extent, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * extent + j) * inner + i;
            let max = (0..extent)
                .map(|j| xd[at(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..extent).map(|j| (xd[at(j)] - max).exp()).sum();
            for j in 0..extent {
                out[at(j)] = if log {
                    xd[at(j)] - max - total.ln()
                } else {
                    (xd[at(j)] - max).exp() / total
                };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn permute_values(x: &Tensor, perm: &[usize]) -> Tensor {
    let src_strides = strides(x.shape());
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let len = x.len();
    let xd = x.data();
    let mut data = Vec::with_capacity(len);
    let mut index = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..len {
        data.push(xd[off]);
        for axis in (0..shape.len()).rev() {
            index[axis] += 1;
            off += step[axis];
            if index[axis] < shape[axis] {
                break;
            }
            off -= step[axis] * index[axis];
            index[axis] = 0;
        }
    }
    Tensor::new(shape, data).expect("permuted shape")
}

/// Output shape after removing `axes`, and the input offset → output offset table.
fn reduce_table(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let src: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let table = expand_table(&src, shape);
    if kept.is_empty() {
        kept.push(1);
    }
    (kept, table)
}

/// Adjoints from one [`Tape::backward`] sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` is off the path.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Like [`Gradients::get`] but an off-path variable yields exact zeros.
    pub fn wrt(&self, v: Var, tape: &Tape) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_contraction() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 7.0]));
        let y = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0, 0.25, 7.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_b_transposed() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let b = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(a, b).unwrap();
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap().wrt(a, &tape);
        // row sums of b: 3, 7, 11
        assert_eq!(g.data(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[2f64.ln(), 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.value(y).is_finite());
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-3.0, 0.0, 3.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[1], 0.5);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 5]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 8]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[0.0]));
        let y = tape.relu(x);
        let s = tape.sum_all(y);
        assert_eq!(tape.backward(s).unwrap().wrt(x, &tape).data(), &[0.0]);
    }

    #[test]
    fn conv_identity_and_selector() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[5, 2], |i| (i[0] * 2 + i[1]) as f64));
        let eye = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.dilated_causal_conv(x, eye, 3).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        // taps (0, 1): each output step copies the later input step
        let sel = tape.constant(t(&[2, 2, 2], &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        let y = tape.dilated_causal_conv(x, sel, 1).unwrap();
        assert_eq!(tape.shape(y), &[4, 2]);
        assert_eq!(tape.value(y).data(), &tape.value(x).data()[2..]);
    }

    #[test]
    fn conv_rejects_oversized_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 1]));
        let k = tape.constant(Tensor::zeros(&[2, 1, 1]));
        assert!(matches!(
            tape.dilated_causal_conv(x, k, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn off_path_gradient_is_exact_zero() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.square(a);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused, &tape).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g.wrt(a, &tape).data(), &[2.0, 4.0]);
    }

    #[test]
    fn broadcast_add_suffix_and_table() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let row = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let col = tape.param(t(&[2, 1], &[10.0, 20.0]));
        let y = tape.add(a, row).unwrap();
        let y = tape.add(y, col).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(row, &tape).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.wrt(col, &tape).data(), &[3.0, 3.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| {
            (i[0] * 100 + i[1] * 10 + i[2]) as f64
        }));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        assert_eq!(tape.value(y).get(&[3, 1, 2]), 123.0);
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
    }

    #[test]
    fn mixture_single_component_at_mean() {
        let mut tape = Tape::new();
        let h = tape.constant(t(&[1, 1], &[0.3]));
        let lg = tape.constant(t(&[1], &[0.0]));
        let mu = tape.constant(t(&[1, 1], &[0.3]));
        let s2 = tape.constant(t(&[1, 1], &[1.0]));
        let l = tape.mixture_nll(h, lg, mu, s2).unwrap();
        let want = 0.5 * (2.0 * PI).ln();
        assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
    }
}
