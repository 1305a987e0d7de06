use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Log(Var),
    Clamp(Var, f64, f64),
    Scale(Var, f64),
    AddScalar(Var),
    MeanAxis(Var, usize),
    SumAxis(Var, usize),
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    Sum(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// A dynamically built computation graph.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Graph::backward`] walks it in reverse.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    tracking: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: true,
        }
    }

    /// A graph for inference only: forward values are computed by the same
    /// kernels, but nothing is recorded for differentiation.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = self.tracking;
        self.push_raw(value, Op::Leaf, needs_grad)
    }

    /// A non-differentiable input (features, targets, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = self.tracking && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        if needs_grad {
            Ok(self.push_raw(value, op, true))
        } else {
            Ok(self.push_raw(value, Op::Constant, false))
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for rank-2 `a: m×k`, `b: n×k`; the usual `x·Wᵀ` of a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!("matmul needs rank-2 operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n, b_strides) = if trans_b {
            (sb[1], sb[0], (1, sb[1] as isize))
        } else {
            (sb[0], sb[1], (sb[1] as isize, 1))
        };
        if k != kb {
            let what = if trans_b { "matmul_nt" } else { "matmul" };
            return Err(Error::Shape(format!("{what}: {sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            b_strides,
            &mut out,
            false,
        );
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("div", a, b, |x, y| x / y)?;
        self.push("div", value, Op::Div(a, b), &[a, b])
    }

    fn broadcast_binary(
        &self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        let plan = BroadcastPlan::new(name, ta.shape(), tb.shape())?;
        let (da, db) = (ta.data(), tb.data());
        let data = (0..plan.len())
            .map(|o| f(da[plan.a_index(o)], db[plan.b_index(o)]))
            .collect();
        Tensor::new(&plan.out_shape, data)
    }

    fn unary(&mut self, name: &str, x: Var, op: Op, f: impl Fn(T) -> T) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(name, value, op, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::from_f64(slope);
        self.unary("leaky_relu", x, Op::LeakyRelu(x, slope), move |v| {
            if v > T::zero() {
                v
            } else {
                v * s
            }
        })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, Op::Log(x), |v| v.ln())
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.unary("clamp", x, Op::Clamp(x, lo, hi), move |v| v.max(l).min(h))
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c_t = T::from_f64(c);
        self.unary("scale", x, Op::Scale(x, c), move |v| v * c_t)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c_t = T::from_f64(c);
        self.unary("add_scalar", x, Op::AddScalar(x), move |v| v + c_t)
    }

    /// Mean over `axis`; the axis is kept with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (value, _) = self.reduce_axis("mean_axis", x, axis, Reduce::Mean)?;
        self.push("mean_axis", value, Op::MeanAxis(x, axis), &[x])
    }

    /// Sum over `axis`; the axis is kept with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (value, _) = self.reduce_axis("sum_axis", x, axis, Reduce::Sum)?;
        self.push("sum_axis", value, Op::SumAxis(x, axis), &[x])
    }

    /// Max over `axis`; the axis is kept with size 1. Ties resolve to the
    /// first index, which is also where the gradient is routed.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (value, argmax) = self.reduce_axis("max_axis", x, axis, Reduce::Max)?;
        self.push("max_axis", value, Op::MaxAxis { x, axis, argmax }, &[x])
    }

    fn reduce_axis(
        &self,
        name: &str,
        x: Var,
        axis: usize,
        kind: Reduce,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape(format!("{name}: axis {axis} invalid for shape {shape:?}")));
        }
        let (outer, n, inner) = split_axis(shape, axis);
        let data = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| data[(o * n + j) * inner + i];
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let mut s = T::zero();
                        for j in 0..n {
                            s += at(j);
                        }
                        if matches!(kind, Reduce::Mean) {
                            s = s / T::from_f64(n as f64);
                        }
                        out.push(s);
                    }
                    Reduce::Max => {
                        let mut best = 0;
                        for j in 1..n {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        argmax.push(best);
                        out.push(at(best));
                    }
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        Ok((Tensor::new(&out_shape, out)?, argmax))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat: axis {axis} invalid for shape {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat on axis {axis}: {base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        self.push("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::Shape(format!("reshape {:?} -> {shape:?}", t.shape())));
        }
        let value = Tensor::new(shape, t.data().to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every node that depends on a leaf receives a gradient; contributions
    /// from fan-out are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.tracking {
            return Err(Error::NoGradTracking);
        }
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                if let Some(ga) = self.grad_slot(*a, grads) {
                    // dA = dC · B_effᵀ
                    let b_eff_t = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, gd, (n as isize, 1), self.value(*b).data(), b_eff_t, ga.data_mut(), true);
                }
                if let Some(gb) = self.grad_slot(*b, grads) {
                    let ad = self.value(*a).data();
                    if *trans_b {
                        // dB = dCᵀ · A   (n×k)
                        T::gemm(n, m, k, gd, (1, n as isize), ad, (k as isize, 1), gb.data_mut(), true);
                    } else {
                        // dB = Aᵀ · dC   (k×n)
                        T::gemm(k, m, n, ad, (1, k as isize), gd, (n as isize, 1), gb.data_mut(), true);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let plan = BroadcastPlan::new("backward", self.shape(a), self.shape(b))?;
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let op = node.op.clone();
                if let Some(ga) = self.grad_slot(a, grads) {
                    let ga = ga.data_mut();
                    for o in 0..plan.len() {
                        let (ia, ib) = (plan.a_index(o), plan.b_index(o));
                        ga[ia] += match op {
                            Op::Mul(..) => gd[o] * vb[ib],
                            Op::Div(..) => gd[o] / vb[ib],
                            _ => gd[o],
                        };
                    }
                }
                if let Some(gb) = self.grad_slot(b, grads) {
                    let gb = gb.data_mut();
                    for o in 0..plan.len() {
                        let (ia, ib) = (plan.a_index(o), plan.b_index(o));
                        gb[ib] += match op {
                            Op::Sub(..) => -gd[o],
                            Op::Mul(..) => gd[o] * va[ia],
                            Op::Div(..) => -gd[o] * va[ia] / (vb[ib] * vb[ib]),
                            _ => gd[o],
                        };
                    }
                }
            }
            Op::Tanh(x) => self.accumulate_map(*x, grads, |j, _| gd[j] * (T::one() - y[j] * y[j])),
            Op::Sigmoid(x) => self.accumulate_map(*x, grads, |j, _| gd[j] * y[j] * (T::one() - y[j])),
            Op::LeakyRelu(x, slope) => {
                let s = T::from_f64(*slope);
                self.accumulate_map(*x, grads, |j, xv| if xv > T::zero() { gd[j] } else { gd[j] * s })
            }
            Op::Log(x) => self.accumulate_map(*x, grads, |j, xv| gd[j] / xv),
            Op::Clamp(x, lo, hi) => {
                let (l, h) = (T::from_f64(*lo), T::from_f64(*hi));
                self.accumulate_map(*x, grads, |j, xv| if xv >= l && xv <= h { gd[j] } else { T::zero() })
            }
            Op::Scale(x, c) => {
                let c = T::from_f64(*c);
                self.accumulate_map(*x, grads, |j, _| gd[j] * c)
            }
            Op::AddScalar(x) => self.accumulate_map(*x, grads, |j, _| gd[j]),
            Op::MeanAxis(x, axis) | Op::SumAxis(x, axis) => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let w = match node.op {
                    Op::MeanAxis(..) => T::one() / T::from_f64(n as f64),
                    _ => T::one(),
                };
                if let Some(gx) = self.grad_slot(*x, grads) {
                    let gx = gx.data_mut();
                    for o in 0..outer {
                        for j in 0..n {
                            for k in 0..inner {
                                gx[(o * n + j) * inner + k] += gd[o * inner + k] * w;
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { x, axis, argmax } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                if let Some(gx) = self.grad_slot(*x, grads) {
                    let gx = gx.data_mut();
                    for o in 0..outer {
                        for k in 0..inner {
                            let r = o * inner + k;
                            gx[(o * n + argmax[r]) * inner + k] += gd[r];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.accumulate_map(*x, grads, |_, _| g0)
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if let Some(gv) = self.grad_slot(v, grads) {
                        let gv = gv.data_mut();
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                gv[dst + j] += gd[src + j];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = self.grad_slot(*x, grads) {
                    let gx = gx.data_mut();
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += gd[src + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => self.accumulate_map(*x, grads, |j, _| gd[j]),
        }
        Ok(())
    }

    /// Gradient buffer for `v`, allocated on first use; `None` if `v` is not differentiable.
    fn grad_slot<'g>(&self, v: Var, grads: &'g mut [Option<Tensor<T>>]) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v))))
    }

    /// `grad[x][j] += f(j, x[j])` over same-shaped input and output.
    fn accumulate_map(&self, x: Var, grads: &mut [Option<Tensor<T>>], f: impl Fn(usize, T) -> T) {
        let xv = self.value(x).data();
        if let Some(gx) = self.grad_slot(x, grads) {
            for (j, gj) in gx.data_mut().iter_mut().enumerate() {
                *gj += f(j, xv[j]);
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Splits a shape into (product before axis, axis length, product after axis).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Index maps from an output element to each operand under numpy-style
/// broadcasting (trailing alignment, size-1 dimensions stretch).
struct BroadcastPlan {
    out_shape: Vec<usize>,
    a_map: Option<Vec<usize>>,
    b_map: Option<Vec<usize>>,
    len: usize,
}

impl BroadcastPlan {
    fn new(name: &str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Self {
                out_shape: a.to_vec(),
                a_map: None,
                b_map: None,
                len: a.iter().product(),
            });
        }
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            out_shape.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => return Err(Error::Shape(format!("{name}: cannot broadcast {a:?} with {b:?}"))),
            });
        }
        let len = out_shape.iter().product();
        let map_for = |p: &[usize]| -> Option<Vec<usize>> {
            if p == out_shape.as_slice() {
                return None;
            }
            // Strides of the operand, zeroed where it is stretched.
            let mut strides = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                strides[d] = if p[d] == 1 { 0 } else { acc };
                acc *= p[d];
            }
            let mut map = Vec::with_capacity(len);
            let mut idx = vec![0usize; rank];
            for _ in 0..len {
                map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            Some(map)
        };
        let a_map = map_for(&pa);
        let b_map = map_for(&pb);
        Ok(Self {
            out_shape,
            a_map,
            b_map,
            len,
        })
    }

    fn len(&self) -> usize {
        self.len
    }

    #[inline]
    fn a_index(&self, o: usize) -> usize {
        self.a_map.as_ref().map_or(o, |m| m[o])
    }

    #[inline]
    fn b_index(&self, o: usize) -> usize {
        self.b_map.as_ref().map_or(o, |m| m[o])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let s = g.sigmoid(x).unwrap();
        let th = g.tanh(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        assert_eq!(g.value(th).data(), &[0.0]);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn linear_sum_gives_outer_product() {
        // loss = sum(W·x) with W: 2x3, x: 3x1 -> dW = 1 ⊗ xᵀ
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
        let x = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::<f64>::inference();
        let x = g.leaf(Tensor::scalar(1.0));
        let y = g.sum(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NoGradTracking)));
    }

    #[test]
    fn max_routes_to_first_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 3.0, 3.0, -1.0, -2.0, -1.0]));
        let m = g.max_axis(x, 1).unwrap();
        assert_eq!(g.value(m).shape(), &[2, 1]);
        assert_eq!(g.value(m).data(), &[3.0, -1.0]);
        let loss = g.sum(m).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn broadcast_bias_and_column() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.leaf(t(&[3], &[10.0, 20.0, 30.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = g.sum_axis(x, 1).unwrap();
        let z = g.div(x, s).unwrap();
        assert!((g.value(z).data()[0] - 1.0 / 6.0).abs() < 1e-15);
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_finite_trips_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[0.0]));
        assert!(matches!(g.log(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(&[2, 1], &[5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(s).data(), &[5.0, 6.0]);
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[0.0; 4]);
    }
}
