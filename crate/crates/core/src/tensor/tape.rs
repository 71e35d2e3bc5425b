//! Arena tape for reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value and enough
//! context to apply its vector-Jacobian product. [`Tape::backward`] consumes
//! the tape, so a recording supports exactly one backward pass.

use std::cell::Cell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static SABOTAGE_TANH: Cell<bool> = const { Cell::new(false) };
}

/// Fault injection for negative-control tests of the gradient checker.
#[doc(hidden)]
pub mod fault {
    /// While set, the tanh backward rule on this thread is scaled by 1.1.
    pub fn sabotage_tanh_derivative(on: bool) {
        super::SABOTAGE_TANH.with(|c| c.set(on));
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRows(Var, Var),
    MulRows(Var, Var),
    ScaleShift(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Softmax {
        input: Var,
        layout: AxisLayout,
    },
    LogSoftmax {
        input: Var,
        layout: AxisLayout,
    },
    Sum(Var),
    Embed {
        table: Var,
        row: usize,
    },
    MaxoutPairs {
        input: Var,
        second: Vec<bool>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        col: Vec<T>,
    },
    AvgPool2 {
        input: Var,
        dims: [usize; 3],
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Pick {
        input: Var,
        index: usize,
    },
}

#[derive(Clone, Copy, Debug)]
struct AxisLayout {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisLayout {
    fn of(shape: &[usize], axis: usize) -> Self {
        AxisLayout {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    fn at(&self, o: usize, a: usize, i: usize) -> usize {
        (o * self.len + a) * self.inner + i
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape that tracks gradients for trainable parameters and leaves.
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// Tape for inference: parameters enter as constants and no backward
    /// context is retained.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {v:?} was not recorded on tape {}", self.id)));
        }
        Ok(())
    }

    fn node(&self, v: Var) -> &Node<T> {
        debug_assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let var = Var {
            tape: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        var
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Independent variable whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    /// Places a stored parameter on the tape. Repeated calls return the same
    /// variable so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let rg = self.grad_enabled && store.is_trainable(id);
        let v = self.push(store.tensor(id).clone(), Op::Param(id), rg);
        self.params.insert(id, v);
        v
    }

    /// Copy of `x` cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn rows_layout(&self, x: Var, r: Var, name: &'static str) -> Result<(usize, usize)> {
        self.check(x)?;
        self.check(r)?;
        let (sx, sr) = (self.shape(x), self.shape(r));
        let rows = sx.first().copied().unwrap_or(0);
        if self.value(r).numel() != rows || rows == 0 {
            return Err(Error::dim(name, sx, sr));
        }
        Ok((rows, self.value(x).numel() / rows))
    }

    /// Adds `b[i]` to every element of row `i` of `x` (rows = leading axis).
    pub fn add_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.rows_layout(x, b, "add_rows")?;
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(cols).enumerate().take(rows) {
            chunk.iter_mut().for_each(|v| *v += bv[i]);
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddRows(x, b), rg))
    }

    /// Multiplies row `i` of `x` by `g[i]`.
    pub fn mul_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (rows, cols) = self.rows_layout(x, g, "mul_rows")?;
        let gv = self.value(g).data();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(cols).enumerate().take(rows) {
            chunk.iter_mut().for_each(|v| *v *= gv[i]);
        }
        let rg = self.any_grad(&[x, g]);
        Ok(self.push(out, Op::MulRows(x, g), rg))
    }

    /// `scale · x + shift`
    pub fn scale_shift(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| scale * v + shift).collect())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::ScaleShift(x, scale), rg))
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Result<Var> {
        self.scale_shift(x, scale, T::zero())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, op, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// Softmax along `axis` restricted to positions where `mask` is nonzero.
    ///
    /// `mask` has either the full shape of `logits` or the extent of `axis`
    /// alone (shared by every slice). Masked outputs are exactly zero and pass
    /// no gradient back.
    pub fn softmax_masked(&mut self, logits: Var, mask: Option<&Tensor<T>>, axis: usize) -> Result<Var> {
        self.check(logits)?;
        let x = self.value(logits);
        if axis >= x.rank() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {:?}", x.shape())));
        }
        let layout = AxisLayout::of(x.shape(), axis);
        let keep = |idx: usize, a: usize| -> bool {
            match mask {
                None => true,
                Some(m) if m.numel() == x.numel() => m.data()[idx] != T::zero(),
                Some(m) => m.data()[a] != T::zero(),
            }
        };
        if let Some(m) = mask {
            if m.numel() != x.numel() && m.numel() != layout.len {
                return Err(Error::dim("softmax_masked", x.shape(), m.shape()));
            }
        }
        let mut out = vec![T::zero(); x.numel()];
        let xd = x.data();
        for o in 0..layout.outer {
            for i in 0..layout.inner {
                let mut max = T::neg_infinity();
                let mut any = false;
                for a in 0..layout.len {
                    let idx = layout.at(o, a, i);
                    if keep(idx, a) {
                        any = true;
                        max = max.max(xd[idx]);
                    }
                }
                if !any {
                    return Err(Error::DegenerateMask);
                }
                let mut total = T::zero();
                for a in 0..layout.len {
                    let idx = layout.at(o, a, i);
                    if keep(idx, a) {
                        let e = (xd[idx] - max).exp();
                        out[idx] = e;
                        total += e;
                    }
                }
                for a in 0..layout.len {
                    out[layout.at(o, a, i)] /= total;
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(out, Op::Softmax { input: logits, layout }, rg))
    }

    pub fn softmax(&mut self, logits: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(logits, None, axis)
    }

    /// Numerically stabilized log-softmax along `axis`.
    pub fn log_softmax(&mut self, logits: Var, axis: usize) -> Result<Var> {
        self.check(logits)?;
        let x = self.value(logits);
        if axis >= x.rank() {
            return Err(Error::Shape(format!("log_softmax axis {axis} out of range for {:?}", x.shape())));
        }
        let layout = AxisLayout::of(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![T::zero(); x.numel()];
        for o in 0..layout.outer {
            for i in 0..layout.inner {
                let max = (0..layout.len)
                    .map(|a| xd[layout.at(o, a, i)])
                    .fold(T::neg_infinity(), T::max);
                let total: T = (0..layout.len).map(|a| (xd[layout.at(o, a, i)] - max).exp()).sum();
                let lse = max + total.ln();
                for a in 0..layout.len {
                    let idx = layout.at(o, a, i);
                    out[idx] = xd[idx] - lse;
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(out, Op::LogSoftmax { input: logits, layout }, rg))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Element `index` (row-major) of `x` as a one-element tensor.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        if index >= t.numel() {
            return Err(Error::Shape(format!("pick index {index} outside {:?}", t.shape())));
        }
        let v = t.data()[index];
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Pick { input: x, index }, rg))
    }

    /// Row `row` of `table[K×n]` as an `[n×1]` column.
    pub fn embed(&mut self, table: Var, row: usize) -> Result<Var> {
        self.check(table)?;
        let t = self.value(table);
        if t.rank() != 2 || row >= t.shape()[0] {
            return Err(Error::Shape(format!("embedding row {row} outside table {:?}", t.shape())));
        }
        let n = t.shape()[1];
        let out = Tensor::new(&[n, 1], t.data()[row * n..(row + 1) * n].to_vec())?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(out, Op::Embed { table, row }, rg))
    }

    /// Maxout over adjacent pairs: `[2m × ...]` flattened → `[m×1]`.
    pub fn maxout_pairs(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        if t.numel() % 2 != 0 {
            return Err(Error::Shape(format!("maxout needs an even extent, got {:?}", t.shape())));
        }
        let mut second = Vec::with_capacity(t.numel() / 2);
        let out: Vec<T> = t
            .data()
            .chunks_exact(2)
            .map(|p| {
                let s = p[1] > p[0];
                second.push(s);
                if s {
                    p[1]
                } else {
                    p[0]
                }
            })
            .collect();
        let m = out.len();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[m, 1], out)?, Op::MaxoutPairs { input: x, second }, rg))
    }

    /// Cross-correlation of `input[C×H×W]` with `kernel[O×C×k×k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] || sk[2] != sk[3] {
            return Err(Error::dim("conv2d", &si, &sk));
        }
        let k = sk[2];
        if k == 0 || stride == 0 {
            return Err(Error::Shape(format!("conv2d needs k ≥ 1 and stride ≥ 1 (k={k}, stride={stride})")));
        }
        let (h, w) = (si[1], si[2]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::Shape(format!(
                "conv2d output extent < 1: input {h}×{w}, kernel {k}, padding {padding}"
            )));
        }
        let geom = ConvGeom {
            channels: si[0],
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (w + 2 * padding - k) / stride + 1,
        };
        let (co, rows, cols) = (sk[0], geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); co * cols];
        let rg = self.any_grad(&[input, kernel]);
        let col = if geom.is_pointwise() {
            kernels::gemm_nn(co, rows, cols, self.value(kernel).data(), self.value(input).data(), &mut out);
            Vec::new()
        } else {
            let col = kernels::im2col(self.value(input).data(), &geom);
            kernels::gemm_nn(co, rows, cols, self.value(kernel).data(), &col, &mut out);
            if rg {
                col
            } else {
                Vec::new()
            }
        };
        let out = Tensor::new(&[co, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                geom,
                col,
            },
            rg,
        ))
    }

    /// 2×2 average pooling, stride 2, over `[C×H×W]` with even H and W.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool2 needs [C×H×W] with even H, W; got {s:?}")));
        }
        let out = kernels::avg_pool2(self.value(x).data(), s[0], s[1], s[2]);
        let out = Tensor::new(&[s[0], s[1] / 2, s[2] / 2], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out,
            Op::AvgPool2 {
                input: x,
                dims: [s[0], s[1], s[2]],
            },
            rg,
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        for &p in parts {
            self.check(p)?;
        }
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::dim("concat", self.shape(first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Runs the reverse sweep from the scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);
        let mut out = Gradients {
            params: HashMap::new(),
            leaves: HashMap::new(),
        };

        fn slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'g mut Vec<T>> {
            let node = &nodes[v.index];
            if !node.requires_grad {
                return None;
            }
            Some(grads[v.index].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
        }

        let sabotage = SABOTAGE_TANH.with(|c| c.get());
        for idx in (0..=loss.index).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(idx, Tensor::new(node.value.shape(), g)?);
                }
                Op::Param(id) => {
                    out.params.insert(*id, Tensor::new(node.value.shape(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[a.index].value.shape(), nodes[b.index].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let bv = nodes[b.index].value.data();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        kernels::gemm_nt(m, n, k, &g, bv, ga);
                    }
                    let av = nodes[a.index].value.data();
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        kernels::gemm_tn(k, m, n, av, &g, gb);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(gv) = slot(&mut grads, nodes, *v) {
                            gv.iter_mut().zip(&g).for_each(|(d, &s)| *d += s);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(d, &s)| *d += s);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gb.iter_mut().zip(&g).for_each(|(d, &s)| *d -= s);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.index].value.data(), nodes[b.index].value.data());
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((d, &s), &o) in ga.iter_mut().zip(&g).zip(bv) {
                            *d += s * o;
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for ((d, &s), &o) in gb.iter_mut().zip(&g).zip(av) {
                            *d += s * o;
                        }
                    }
                }
                Op::AddRows(x, b) => {
                    let rows = nodes[b.index].value.numel();
                    let cols = g.len() / rows;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(d, &s)| *d += s);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for (r, chunk) in g.chunks_exact(cols).enumerate() {
                            gb[r] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
                Op::MulRows(x, s) => {
                    let sv = nodes[s.index].value.data();
                    let xv = nodes[x.index].value.data();
                    let cols = g.len() / sv.len();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, (dchunk, gchunk)) in gx.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).enumerate() {
                            dchunk.iter_mut().zip(gchunk).for_each(|(d, &gg)| *d += gg * sv[r]);
                        }
                    }
                    if let Some(gs) = slot(&mut grads, nodes, *s) {
                        for (r, (gchunk, xchunk)) in g.chunks_exact(cols).zip(xv.chunks_exact(cols)).enumerate() {
                            gs[r] += kernels::dot(gchunk, xchunk);
                        }
                    }
                }
                Op::ScaleShift(x, scale) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(d, &s)| *d += s * *scale);
                    }
                }
                Op::Tanh(x) => {
                    let factor = if sabotage { T::of(1.1) } else { T::one() };
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((d, &s), &t) in gx.iter_mut().zip(&g).zip(y) {
                            *d += s * (T::one() - t * t) * factor;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((d, &s), &t) in gx.iter_mut().zip(&g).zip(y) {
                            *d += s * t * (T::one() - t);
                        }
                    }
                }
                Op::Relu(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((d, &s), &t) in gx.iter_mut().zip(&g).zip(y) {
                            if t > T::zero() {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Exp(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((d, &s), &t) in gx.iter_mut().zip(&g).zip(y) {
                            *d += s * t;
                        }
                    }
                }
                Op::Softmax { input, layout } => {
                    if let Some(gx) = slot(&mut grads, nodes, *input) {
                        for o in 0..layout.outer {
                            for i in 0..layout.inner {
                                let inner: T = (0..layout.len)
                                    .map(|a| {
                                        let idx = layout.at(o, a, i);
                                        y[idx] * g[idx]
                                    })
                                    .sum();
                                for a in 0..layout.len {
                                    let idx = layout.at(o, a, i);
                                    gx[idx] += y[idx] * (g[idx] - inner);
                                }
                            }
                        }
                    }
                }
                Op::LogSoftmax { input, layout } => {
                    if let Some(gx) = slot(&mut grads, nodes, *input) {
                        for o in 0..layout.outer {
                            for i in 0..layout.inner {
                                let total: T = (0..layout.len).map(|a| g[layout.at(o, a, i)]).sum();
                                for a in 0..layout.len {
                                    let idx = layout.at(o, a, i);
                                    gx[idx] += g[idx] - y[idx].exp() * total;
                                }
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Pick { input, index } => {
                    if let Some(gx) = slot(&mut grads, nodes, *input) {
                        gx[*index] += g[0];
                    }
                }
                Op::Embed { table, row } => {
                    let n = g.len();
                    if let Some(gt) = slot(&mut grads, nodes, *table) {
                        gt[row * n..(row + 1) * n].iter_mut().zip(&g).for_each(|(d, &s)| *d += s);
                    }
                }
                Op::MaxoutPairs { input, second } => {
                    if let Some(gx) = slot(&mut grads, nodes, *input) {
                        for (j, (&s, &pick2)) in g.iter().zip(second).enumerate() {
                            gx[2 * j + usize::from(pick2)] += s;
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    geom,
                    col,
                } => {
                    let co = nodes[kernel.index].value.shape()[0];
                    let (rows, cols) = (geom.col_rows(), geom.col_cols());
                    let xv = nodes[input.index].value.data();
                    let kv = nodes[kernel.index].value.data();
                    let unfolded: &[T] = if geom.is_pointwise() { xv } else { col };
                    if let Some(gk) = slot(&mut grads, nodes, *kernel) {
                        kernels::gemm_nt(co, cols, rows, &g, unfolded, gk);
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *input) {
                        if geom.is_pointwise() {
                            kernels::gemm_tn(rows, co, cols, kv, &g, gx);
                        } else {
                            let mut gcol = vec![T::zero(); rows * cols];
                            kernels::gemm_tn(rows, co, cols, kv, &g, &mut gcol);
                            kernels::col2im(&gcol, geom, gx);
                        }
                    }
                }
                Op::AvgPool2 { input, dims } => {
                    if let Some(gx) = slot(&mut grads, nodes, *input) {
                        kernels::avg_pool2_backward(&g, dims[0], dims[1], dims[2], gx);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.index].value.numel();
                        if let Some(gp) = slot(&mut grads, nodes, *p) {
                            gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, &s)| *d += s);
                        }
                        offset += len;
                    }
                }
                Op::Reshape(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`Tape::leaf`]; `None` if the loss does
    /// not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.index)
    }

    /// Gradient of a parameter; `None` if the parameter did not take part.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient of a parameter, zero-filled when the parameter did not take part.
    pub fn param_or_zero(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        self.params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape()))
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor<T>> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(3.0));
        let p = tape.mul(x, y).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 3.0);
        assert_eq!(g.wrt(y).unwrap().item(), 2.0);
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let w = tape.leaf(Tensor::scalar(5.0));
        let l = tape.mul(x, x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 4.0);
        assert!(g.wrt(w).is_none());
    }

    #[test]
    fn backward_rejects_foreign_and_non_scalar_vars() {
        let mut other = Tape::<f64>::new();
        let foreign = other.leaf(Tensor::scalar(1.0));
        let mut tape = Tape::<f64>::new();
        let _ = tape.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(foreign), Err(Error::Tape(_))));

        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(Error::Tape(_))));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let ai = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        let s = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_masked_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let p = tape.softmax_masked(z, Some(&t(&[2], &[1.0, 1.0])), 0).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

        let z = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let p = tape.softmax_masked(z, Some(&t(&[3], &[1.0, 1.0, 0.0])), 0).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5, 0.0]);

        let z = tape.constant(t(&[2], &[3.0, 1.0]));
        let err = tape.softmax_masked(z, Some(&t(&[2], &[0.0, 0.0])), 0);
        assert!(matches!(err, Err(Error::DegenerateMask)));
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]));
        let p = tape.softmax(z, 0).unwrap();
        let v = tape.value(p).data().to_vec();
        for c in 0..3 {
            assert!((v[c] + v[3 + c] - 1.0).abs() < 1e-12);
        }
        assert!(v[0] > v[3]);
    }

    #[test]
    fn conv_shape_arithmetic_and_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 8, 8]));
        let k = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4]);
        let big = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        let small = tape.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(tape.conv2d(small, big, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_identity_kernel_and_constant_image() {
        let mut tape = Tape::<f64>::new();
        let img: Vec<f64> = (0..20).map(|v| v as f64 * 0.5).collect();
        let x = tape.constant(t(&[1, 4, 5], &img));
        let id = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, id, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &img[..]);

        let c = 1.7;
        let flat = tape.constant(Tensor::full(&[1, 6, 6], c));
        let ones = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(flat, ones, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4]);
        for &v in tape.value(y).data() {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn param_reuse_accumulates_into_one_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::scalar(3.0), true).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        assert_eq!(a, b);
        let sq = tape.mul(a, b).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.param(w).unwrap().item(), 6.0);
    }

    #[test]
    fn maxout_takes_pairwise_max() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4, 1], &[1.0, 3.0, 5.0, 2.0]));
        let m = tape.maxout_pairs(x).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
    }
}
