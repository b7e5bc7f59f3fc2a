use rayon::prelude::*;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Execution policy for batch-parallel kernels.
///
/// `Strict` runs every kernel serially. `Parallel` spreads convolution work
/// over batch elements with rayon; per-sample partial results are still
/// reduced in batch order, so both modes produce identical bits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecMode {
    #[default]
    Strict,
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Transpose { x: Var },
    Reshape { x: Var },
    Relu { x: Var },
    Abs { x: Var },
    Softmax { x: Var, axis: usize },
    Reduce { x: Var, kind: ReduceKind, axis: Option<usize>, argmax: Vec<usize> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleBy { x: Var, s: Var },
    Affine { x: Var, scale: f64 },
    TopKMean { x: Var, k: usize, selected: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for reverse-mode differentiation.
///
/// Nodes are appended in execution order, which is also a topological order;
/// [`Graph::backward`] walks them in exact reverse. Leaves created with
/// [`Graph::param`] require gradients; [`Graph::constant`] leaves do not, and
/// anything computed only from constants is itself constant.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    mode: ExecMode,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Extent split of `shape` around `axis`: `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::with_mode(ExecMode::Strict)
    }

    pub fn with_mode(mode: ExecMode) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaves that accumulate gradients.
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.needs_grad)
            .count()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let data = self.grads[v.0].clone()?;
        Some(Tensor::new(self.shape(v).to_vec(), data).expect("gradient matches value shape"))
    }

    /// Reset all gradient state. Values are untouched.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), self.shape(bias), stride, padding)?;
        let n = self.shape(input)[0];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); n * geom.out_len()];
        match self.mode {
            ExecMode::Strict => {
                let mut scratch = Vec::new();
                for (xs, os) in x.chunks(geom.in_len()).zip(out.chunks_mut(geom.out_len())) {
                    kernels::conv_forward_sample(&geom, xs, w, b, os, &mut scratch);
                }
            }
            ExecMode::Parallel => {
                out.par_chunks_mut(geom.out_len())
                    .zip(x.par_chunks(geom.in_len()))
                    .for_each_init(Vec::new, |scratch, (os, xs)| {
                        kernels::conv_forward_sample(&geom, xs, w, b, os, scratch)
                    });
            }
        }
        let value = Tensor::new(vec![n, geom.out_channels, geom.out_height, geom.out_width], out)?;
        let needs = self.any_grad(&[input, weight, bias]);
        self.push(value, Op::Conv2d { input, weight, bias, geom }, needs)
    }

    /// Matrix product of `M×K` by `K×N`, or batched `B×M×K` by `B×K×N`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul";
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([ba, m, k], [bb, k2, n]) => {
                if ba != bb {
                    return Err(Error::shape(OP, "batch (dim 0)", *ba, *bb));
                }
                (*ba, *m, *k, *k2, *n)
            }
            _ => {
                return Err(Error::invalid(
                    OP,
                    format!("operands must both be 2-D or both 3-D, got {sa:?} and {sb:?}"),
                ))
            }
        };
        if k != k2 {
            return Err(Error::shape(OP, "inner dimension", k, k2));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..],
                (k as isize, 1),
                &bv[i * k * n..],
                (n as isize, 1),
                T::zero(),
                &mut out[i * m * n..],
                (n as isize, 1),
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let needs = self.any_grad(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, batch, m, k, n }, needs)
    }

    /// Swap the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, r, c) = match shape.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => return Err(Error::invalid("transpose", format!("expected rank 2 or 3, got {shape:?}"))),
        };
        let out = transpose_data(self.value(x).data(), batch, r, c);
        let mut new_shape = shape.clone();
        let nd = new_shape.len();
        new_shape.swap(nd - 1, nd - 2);
        let needs = self.any_grad(&[x]);
        self.push(Tensor::new(new_shape, out)?, Op::Transpose { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Reshape { x }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.abs()).collect())?;
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Abs { x }, needs)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for rank {}", shape.len())));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let needs = self.any_grad(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, needs)
    }

    /// Reduce along one axis (removing it) or over all elements (`None`,
    /// giving shape `[1]`). Max routes gradient to the lowest-index maximum.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, shape.iter().product(), 1, vec![1]),
            Some(a) if a < shape.len() => {
                let (o, l, i) = split_axis(&shape, a);
                let mut s = shape.clone();
                s.remove(a);
                if s.is_empty() {
                    s.push(1);
                }
                (o, l, i, s)
            }
            Some(a) => {
                return Err(Error::invalid("reduce", format!("axis {a} out of range for rank {}", shape.len())))
            }
        };
        if len == 0 {
            return Err(Error::invalid("reduce", "cannot reduce an empty axis"));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let r = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut s = T::zero();
                        for j in 0..len {
                            s += src[at(j)];
                        }
                        out[r] = if kind == ReduceKind::Mean { s / T::of(len as f64) } else { s };
                    }
                    ReduceKind::Max => {
                        let mut best = 0;
                        for j in 1..len {
                            if src[at(j)] > src[at(best)] {
                                best = j;
                            }
                        }
                        out[r] = src[at(best)];
                        argmax[r] = at(best);
                    }
                }
            }
        }
        let needs = self.any_grad(&[x]);
        self.push(Tensor::new(out_shape, out)?, Op::Reduce { x, kind, axis, argmax }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum, None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean, None)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::invalid(op, format!("operand shapes differ: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let needs = self.any_grad(&[a, b]);
        self.push(value, Op::Add { a, b }, needs)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let needs = self.any_grad(&[a, b]);
        self.push(value, Op::Mul { a, b }, needs)
    }

    /// Multiply every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let factor = self
            .value(s)
            .item()
            .ok_or_else(|| Error::shape("scale_by", "scale element count", 1, self.value(s).numel()))?;
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * factor).collect())?;
        let needs = self.any_grad(&[x, s]);
        self.push(value, Op::ScaleBy { x, s }, needs)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (a, b) = (T::of(scale), T::of(shift));
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| a * e + b).collect())?;
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Affine { x, scale }, needs)
    }

    /// Mean of the `k` largest values per leading-axis slice; output `[N]`.
    ///
    /// Selection is by descending value with ties going to the lowest flat
    /// index, and the selected values are summed in that order.
    pub fn topk_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.first().ok_or_else(|| Error::invalid("topk_mean", "empty shape"))?;
        let per = shape[1..].iter().product::<usize>();
        if k == 0 || k > per {
            return Err(Error::invalid("topk_mean", format!("k = {k} outside 1..={per}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        let mut selected = Vec::with_capacity(n * k);
        let mut order: Vec<usize> = Vec::with_capacity(per);
        for s in 0..n {
            let row = &src[s * per..(s + 1) * per];
            order.clear();
            order.extend(0..per);
            order.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).expect("finite values"));
            let mut total = T::zero();
            for &i in &order[..k] {
                total += row[i];
                selected.push(s * per + i);
            }
            out.push(total / T::of(k as f64));
        }
        let needs = self.any_grad(&[x]);
        self.push(Tensor::new(vec![n], out)?, Op::TopKMean { x, k, selected }, needs)
    }

    /// Bilinear resize is forward-only: the pipeline never differentiates
    /// with respect to pixels, so inputs requiring gradients are rejected.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if self.requires_grad(x) {
            return Err(Error::invalid(
                "bilinear_resize",
                "input requires grad; resampling is not differentiable here, pass a constant",
            ));
        }
        let value = kernels::bilinear_resize(self.value(x), out_h, out_w)?;
        self.constant(value)
    }

    // ----------------------------------------------------------- backward

    /// Accumulate `d loss / d node` into every node that requires a gradient.
    /// Repeated calls add up until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::DetachedLoss);
        }
        let mut pending: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = pending[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &gout, &mut pending);
            add_into(&mut self.grads[idx], gout);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &[T], pending: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, g: Vec<T>| {
            if self.nodes[v.0].needs_grad {
                add_into(&mut pending[v.0], g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let (dx, dw) = self.conv_backward(geom, *input, *weight, gout, needs(*input), needs(*weight));
                if let Some(dx) = dx {
                    send(*input, dx);
                }
                if let Some(dw) = dw {
                    send(*weight, dw);
                }
                if needs(*bias) {
                    let p = geom.out_positions();
                    let mut db = vec![T::zero(); geom.out_channels];
                    for sample in gout.chunks(geom.out_len()) {
                        for (o, plane) in sample.chunks(p).enumerate() {
                            for &g in plane {
                                db[o] += g;
                            }
                        }
                    }
                    send(*bias, db);
                }
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    let bv = val(*b);
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..*batch {
                        // dA = dC · Bᵀ
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gout[i * m * n..],
                            (n as isize, 1),
                            &bv[i * k * n..],
                            (1, n as isize),
                            T::zero(),
                            &mut da[i * m * k..],
                            (k as isize, 1),
                        );
                    }
                    send(*a, da);
                }
                if needs(*b) {
                    let av = val(*a);
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..*batch {
                        // dB = Aᵀ · dC
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av[i * m * k..],
                            (1, k as isize),
                            &gout[i * m * n..],
                            (n as isize, 1),
                            T::zero(),
                            &mut db[i * k * n..],
                            (n as isize, 1),
                        );
                    }
                    send(*b, db);
                }
            }
            Op::Transpose { x } => {
                let s = node.value.shape();
                let (batch, r, c) = match *s {
                    [r, c] => (1, r, c),
                    [b, r, c] => (b, r, c),
                    _ => unreachable!("transpose output is rank 2 or 3"),
                };
                send(*x, transpose_data(gout, batch, r, c));
            }
            Op::Reshape { x } => send(*x, gout.to_vec()),
            Op::Relu { x } => {
                let g = zip_map(val(*x), gout, |a, g| if a > T::zero() { g } else { T::zero() });
                send(*x, g);
            }
            Op::Abs { x } => {
                let g = zip_map(val(*x), gout, |a, g| {
                    if a > T::zero() {
                        g
                    } else if a < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                });
                send(*x, g);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += gout[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Reduce { x, kind, axis, argmax } => {
                let in_shape = self.nodes[x.0].value.shape();
                let numel = in_shape.iter().product();
                let (outer, len, inner) = match axis {
                    None => (1, numel, 1),
                    Some(a) => split_axis(in_shape, *a),
                };
                let mut dx = vec![T::zero(); numel];
                match kind {
                    ReduceKind::Max => {
                        for (r, &src) in argmax.iter().enumerate() {
                            dx[src] += gout[r];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let scale = if *kind == ReduceKind::Mean {
                            T::one() / T::of(len as f64)
                        } else {
                            T::one()
                        };
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    dx[(o * len + j) * inner + i] = gout[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Add { a, b } => {
                send(*a, gout.to_vec());
                send(*b, gout.to_vec());
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    send(*a, zip_map(gout, val(*b), |g, y| g * y));
                }
                if needs(*b) {
                    send(*b, zip_map(gout, val(*a), |g, y| g * y));
                }
            }
            Op::ScaleBy { x, s } => {
                let factor = val(*s)[0];
                if needs(*x) {
                    send(*x, gout.iter().map(|&g| g * factor).collect());
                }
                if needs(*s) {
                    let mut acc = T::zero();
                    for (&g, &a) in gout.iter().zip(val(*x)) {
                        acc += g * a;
                    }
                    send(*s, vec![acc]);
                }
            }
            Op::Affine { x, scale } => {
                let a = T::of(*scale);
                send(*x, gout.iter().map(|&g| g * a).collect());
            }
            Op::TopKMean { x, k, selected } => {
                let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                let inv = T::one() / T::of(*k as f64);
                for (s, chunk) in selected.chunks(*k).enumerate() {
                    for &i in chunk {
                        dx[i] += gout[s] * inv;
                    }
                }
                send(*x, dx);
            }
        }
    }

    fn conv_backward(
        &self,
        geom: &ConvGeom,
        input: Var,
        weight: Var,
        gout: &[T],
        want_dx: bool,
        want_dw: bool,
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let x = self.nodes[input.0].value.data();
        let w = self.nodes[weight.0].value.data();
        let n = x.len() / geom.in_len();
        let wlen = geom.out_channels * geom.patch_len();
        let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
        let mut parts = want_dw.then(|| vec![T::zero(); n * wlen]);

        let job = |scratch: &mut Vec<T>, s: usize, dxs: Option<&mut [T]>, dws: Option<&mut [T]>| {
            kernels::conv_backward_sample(
                geom,
                &x[s * geom.in_len()..(s + 1) * geom.in_len()],
                w,
                &gout[s * geom.out_len()..(s + 1) * geom.out_len()],
                dws,
                dxs,
                scratch,
            );
        };
        match self.mode {
            ExecMode::Strict => {
                let mut scratch = Vec::new();
                for s in 0..n {
                    let dxs = dx.as_mut().map(|d| &mut d[s * geom.in_len()..(s + 1) * geom.in_len()]);
                    let dws = parts.as_mut().map(|p| &mut p[s * wlen..(s + 1) * wlen]);
                    job(&mut scratch, s, dxs, dws);
                }
            }
            ExecMode::Parallel => {
                let in_len = geom.in_len();
                let dx_chunks: Vec<Option<&mut [T]>> = match dx.as_mut() {
                    Some(d) => d.chunks_mut(in_len).map(Some).collect(),
                    None => (0..n).map(|_| None).collect(),
                };
                let dw_chunks: Vec<Option<&mut [T]>> = match parts.as_mut() {
                    Some(p) => p.chunks_mut(wlen).map(Some).collect(),
                    None => (0..n).map(|_| None).collect(),
                };
                dx_chunks
                    .into_par_iter()
                    .zip(dw_chunks)
                    .enumerate()
                    .for_each_init(Vec::new, |scratch, (s, (dxs, dws))| job(scratch, s, dxs, dws));
            }
        }
        let dw = parts.map(|p| {
            let mut acc = vec![T::zero(); wlen];
            for part in p.chunks(wlen) {
                acc.iter_mut().zip(part).for_each(|(a, &v)| *a += v);
            }
            acc
        });
        (dx, dw)
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose_data<T: Real>(src: &[T], batch: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let (s, d) = (&src[b * r * c..], &mut out[b * r * c..]);
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
    out
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Reshape { .. } => "reshape",
        Op::Relu { .. } => "relu",
        Op::Abs { .. } => "abs",
        Op::Softmax { .. } => "softmax",
        Op::Reduce { .. } => "reduce",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::ScaleBy { .. } => "scale_by",
        Op::Affine { .. } => "affine",
        Op::TopKMean { .. } => "topk_mean",
    }
}
