//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. Node inputs always have smaller indices than the node
//! itself, so a single reverse sweep over the node list is a reverse
//! topological order and visits each node exactly once.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::{Gradients, ParamId, ParamStore, StoreId};
use super::tensor::{split_axis, strides_of, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Added inside `log` and used as the degenerate-norm threshold.
pub const EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Input,
    Param(StoreId, ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SumAll(Var),
    SumAxis(Var),
    Softmax(Var, usize),
    L2Normalize { x: Var, axis: usize, norms: Vec<T> },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Embedding { table: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Recorded computation. Consumed by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass: parameter gradients grouped by store, plus
/// gradients of tracked [`Tape::input`] leaves.
#[derive(Debug)]
pub struct Backward<T> {
    params: Vec<Gradients<T>>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Backward<T> {
    /// Gradients for `store`; empty when the tape never touched it.
    pub fn params_for(&self, store: StoreId) -> Gradients<T> {
        self.params
            .iter()
            .find(|g| g.store() == store)
            .cloned()
            .unwrap_or_else(|| Gradients::empty(store, 0))
    }

    /// Stores that received any gradient.
    pub fn stores(&self) -> Vec<StoreId> {
        self.params.iter().map(Gradients::store).collect()
    }

    /// Gradient of an input leaf (zeros are represented as `None`).
    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v)
    }

    pub fn take_input(&mut self, v: Var) -> Option<Tensor<T>> {
        self.inputs.remove(&v)
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Equal-rank broadcasting: each dimension must match or be 1 on one side.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(mismatch(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch(op, a, b)),
        })
        .collect()
}

/// For each flat output index, the flat index into an operand of shape `src`.
fn broadcast_index(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if out == src {
        return (0..n).collect();
    }
    let out_strides = strides_of(out);
    let src_strides = strides_of(src);
    (0..n)
        .map(|flat| {
            let mut rem = flat;
            let mut idx = 0;
            for d in 0..out.len() {
                let coord = rem / out_strides[d];
                rem %= out_strides[d];
                if src[d] != 1 {
                    idx += coord * src_strides[d];
                }
            }
            idx
        })
        .collect()
}

/// Sums a gradient of shape `out` down to the broadcast operand shape `src`.
fn reduce_to<T: Real>(g: &Tensor<T>, src: &[usize]) -> Tensor<T> {
    if g.shape() == src {
        return g.clone();
    }
    let map = broadcast_index(g.shape(), src);
    let mut acc = Tensor::zeros(src);
    let d = acc.data_mut();
    for (i, &j) in map.iter().enumerate() {
        d[j] = d[j] + g.data()[i];
    }
    acc
}

fn guard_denominator<T: Real>(b: T) -> T {
    let eps = T::of(EPS);
    if b.abs() < eps {
        if b < T::zero() {
            -eps
        } else {
            eps
        }
    } else {
        b
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Tracked leaf whose gradient is reported in [`Backward::input`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Tracked leaf bound to a parameter of `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(store.id(), id), true)
    }

    /// Parameter value recorded as an untracked constant (frozen network).
    pub fn frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(name, &sa, &sb)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&out, &sa);
            let ib = broadcast_index(&out, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(Tensor::new(out, data)?, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / guard_denominator(y), Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let tracked = self.nodes[x.0].tracked;
        self.push(value, op, tracked)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// `ln(max(x, 0) + 1e-12)`.
    pub fn log(&mut self, x: Var) -> Var {
        let eps = T::of(EPS);
        self.unary(x, |v| (v.max(T::zero()) + eps).ln(), Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let tracked = self.nodes[x.0].tracked;
        self.push(Tensor::scalar(s), Op::SumAll(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let d = &mut out[o * inner + i];
                    *d = *d + src[(o * len + a) * inner + i];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(Tensor::new(oshape, out)?, Op::SumAxis(x), tracked))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = T::of(self.shape(x).get(axis).copied().unwrap_or(1) as f64);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / n))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| src[at(a)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for a in 0..len {
                    let e = (src[at(a)] - m).exp();
                    out[at(a)] = e;
                    z = z + e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / z;
                }
            }
        }
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x, axis), tracked))
    }

    /// L2-normalizes each fiber along `axis`. Fibers with norm below `1e-12`
    /// become zero (and pass zero gradient).
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("l2_normalize", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut norms = vec![T::zero(); outer * inner];
        let eps = T::of(EPS);
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let n = (0..len)
                    .map(|a| src[at(a)] * src[at(a)])
                    .sum::<T>()
                    .sqrt();
                norms[o * inner + i] = n;
                if !(n < eps) {
                    for a in 0..len {
                        out[at(a)] = src[at(a)] / n;
                    }
                }
            }
        }
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::L2Normalize { x, axis, norms },
            tracked,
        ))
    }

    /// `[m,k] @ [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(t, Op::Reshape(x), tracked))
    }

    /// 2-D convolution of a `[C,H,W]` input with `[O,C,kh,kw]` weights and an
    /// optional `[O]` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if stride == 0 || sx[1] + 2 * pad < sw[2] || sx[2] + 2 * pad < sw[3] {
            return Err(Error::invalid("conv2d", "kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(mismatch("conv2d bias", self.shape(b), &[sw[0]]));
            }
        }
        let geom = ConvGeom {
            channels: sx[0],
            height: sx[1],
            width: sx[2],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let o = sw[0];
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![T::zero(); o * ho * wo];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (ch, row) in out.chunks_mut(ho * wo).enumerate() {
                row.fill(bv[ch]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            o,
            geom.patch_len(),
            ho * wo,
            T::one(),
            self.value(w).data(),
            false,
            &cols,
            false,
            beta,
            &mut out,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let tracked = self.any_tracked(&deps);
        // cols are only needed to form dW
        let cols = if self.nodes[w.0].tracked { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::new(vec![o, ho, wo], out)?,
            Op::Conv2d { x, w, b, geom, cols },
            tracked,
        ))
    }

    /// Max-pool over a `[C,H,W]` input.
    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] < k || s[2] < k || k == 0 || stride == 0 {
            return Err(Error::invalid("max_pool", format!("window {k} on {s:?}")));
        }
        let (vals, argmax, ho, wo) = kernels::max_pool(self.value(x).data(), s[0], s[1], s[2], k, stride);
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(
            Tensor::new(vec![s[0], ho, wo], vals)?,
            Op::MaxPool { x, argmax },
            tracked,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let tracked = self.any_tracked(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, tracked))
    }

    /// Rows of a `[V,E]` table, shape `[n,E]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("embedding", format!("table shape {s:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::invalid("embedding", format!("index {bad} >= {}", s[0])));
        }
        let e = s[1];
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            out.extend_from_slice(&src[i * e..(i + 1) * e]);
        }
        let tracked = self.nodes[table.0].tracked;
        Ok(self.push(
            Tensor::new(vec![indices.len(), e], out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            tracked,
        ))
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(self, loss: Var) -> Result<Backward<T>> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let seed = Tensor::full(&shape, T::one());
        self.backward_from(vec![(loss, seed)])
    }

    /// Vector-Jacobian product: backpropagates the given output cotangents.
    pub fn backward_from(self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Backward<T>> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward", "empty tape"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.shape(v) {
                return Err(mismatch("backward seed", g.shape(), self.shape(v)));
            }
            accumulate(&mut grads, v, g);
        }
        let mut params: Vec<Gradients<T>> = Vec::new();
        let mut inputs = HashMap::new();

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut params, &mut inputs)?;
        }
        Ok(Backward { params, inputs })
    }

    fn propagate(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        params: &mut Vec<Gradients<T>>,
        inputs: &mut HashMap<Var, Tensor<T>>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let gd = g.data();
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let send = |v: Var, t: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if self.nodes[v.0].tracked {
                accumulate(grads, v, t);
            }
        };

        match &node.op {
            Op::Constant => {}
            Op::Input => {
                let v = Var(i);
                match inputs.get_mut(&v) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        inputs.insert(v, g);
                    }
                }
            }
            Op::Param(store, id) => {
                let slot = match params.iter().position(|p| p.store() == *store) {
                    Some(p) => p,
                    None => {
                        params.push(Gradients::empty(*store, 0));
                        params.len() - 1
                    }
                };
                params[slot].accumulate(*id, &g);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                send(a, reduce_to(&g, self.shape(a)), grads);
                send(b, reduce_to(&g, self.shape(b)), grads);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                send(a, reduce_to(&g, self.shape(a)), grads);
                send(b, reduce_to(&g.map(|v| -v), self.shape(b)), grads);
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let out_shape = node.value.shape();
                let (sa, sb) = (self.shape(a), self.shape(b));
                let ia = broadcast_index(out_shape, sa);
                let ib = broadcast_index(out_shape, sb);
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let is_div = matches!(node.op, Op::Div(..));
                if tracked(a) {
                    let full = Tensor::from_fn(out_shape, |k| {
                        let bv = vb[ib[k]];
                        if is_div {
                            gd[k] / guard_denominator(bv)
                        } else {
                            gd[k] * bv
                        }
                    });
                    send(a, reduce_to(&full, sa), grads);
                }
                if tracked(b) {
                    let full = Tensor::from_fn(out_shape, |k| {
                        if is_div {
                            let bv = guard_denominator(vb[ib[k]]);
                            -gd[k] * va[ia[k]] / (bv * bv)
                        } else {
                            gd[k] * va[ia[k]]
                        }
                    });
                    send(b, reduce_to(&full, sb), grads);
                }
            }
            Op::Scale(x, s) => send(*x, g.map(|v| v * *s), grads),
            Op::AddScalar(x) => send(*x, g, grads),
            Op::Exp(x) => {
                let t = Tensor::from_fn(g.shape(), |k| gd[k] * y[k]);
                send(*x, t, grads);
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let eps = T::of(EPS);
                let t = Tensor::from_fn(g.shape(), |k| {
                    if xv[k] < T::zero() {
                        T::zero()
                    } else {
                        gd[k] / (xv[k] + eps)
                    }
                });
                send(*x, t, grads);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let t = Tensor::from_fn(g.shape(), |k| {
                    if xv[k] > T::zero() {
                        gd[k]
                    } else {
                        T::zero()
                    }
                });
                send(*x, t, grads);
            }
            Op::Sigmoid(x) => {
                let t = Tensor::from_fn(g.shape(), |k| gd[k] * y[k] * (T::one() - y[k]));
                send(*x, t, grads);
            }
            Op::Tanh(x) => {
                let t = Tensor::from_fn(g.shape(), |k| gd[k] * (T::one() - y[k] * y[k]));
                send(*x, t, grads);
            }
            Op::SumAll(x) => {
                let t = Tensor::full(self.shape(*x), gd[0]);
                send(*x, t, grads);
            }
            Op::SumAxis(x) => {
                let xs = self.shape(*x).to_vec();
                let map = broadcast_index(&xs, g.shape());
                let t = Tensor::from_fn(&xs, |k| gd[map[k]]);
                send(*x, t, grads);
            }
            Op::Softmax(x, axis) => {
                let shape = node.value.shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut out = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + ii;
                        let dot: T = (0..len).map(|a| gd[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            out[at(a)] = y[at(a)] * (gd[at(a)] - dot);
                        }
                    }
                }
                send(*x, Tensor::new(shape.to_vec(), out)?, grads);
            }
            Op::L2Normalize { x, axis, norms } => {
                let shape = node.value.shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let eps = T::of(EPS);
                let mut out = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let n = norms[o * inner + ii];
                        if n < eps {
                            continue;
                        }
                        let at = |a: usize| (o * len + a) * inner + ii;
                        let dot: T = (0..len).map(|a| gd[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            out[at(a)] = (gd[at(a)] - y[at(a)] * dot) / n;
                        }
                    }
                }
                send(*x, Tensor::new(shape.to_vec(), out)?, grads);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if tracked(a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), gd, false, self.value(b).data(), true, T::zero(), &mut da);
                    send(a, Tensor::new(vec![m, k], da)?, grads);
                }
                if tracked(b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), self.value(a).data(), true, gd, false, T::zero(), &mut db);
                    send(b, Tensor::new(vec![k, n], db)?, grads);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut out = vec![T::zero(); r * c];
                for ii in 0..r {
                    for j in 0..c {
                        out[j * r + ii] = gd[ii * c + j];
                    }
                }
                send(*x, Tensor::new(vec![c, r], out)?, grads);
            }
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                send(*x, g.reshaped(&s)?, grads);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let o = self.shape(*w)[0];
                let (ho, wo) = geom.out_hw();
                let hw = ho * wo;
                let pl = geom.patch_len();
                if tracked(*w) {
                    let mut dw = vec![T::zero(); o * pl];
                    T::gemm(o, hw, pl, T::one(), gd, false, cols, true, T::zero(), &mut dw);
                    send(*w, Tensor::new(self.shape(*w).to_vec(), dw)?, grads);
                }
                if let Some(b) = b {
                    if tracked(*b) {
                        let db: Vec<T> = gd.chunks(hw).map(|r| r.iter().copied().sum()).collect();
                        send(*b, Tensor::new(vec![o], db)?, grads);
                    }
                }
                if tracked(*x) {
                    let mut dcols = vec![T::zero(); pl * hw];
                    T::gemm(pl, o, hw, T::one(), self.value(*w).data(), true, gd, false, T::zero(), &mut dcols);
                    let dx = kernels::col2im(&dcols, geom);
                    send(*x, Tensor::new(self.shape(*x).to_vec(), dx)?, grads);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (k, &src) in argmax.iter().enumerate() {
                    d[src] = d[src] + gd[k];
                }
                send(*x, dx, grads);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let vs = self.shape(v).to_vec();
                    let len = vs[*axis];
                    if tracked(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        send(v, Tensor::new(vs, part)?, grads);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, full, inner) = split_axis(&xs, *axis);
                let len = g.shape()[*axis];
                let mut dx = Tensor::zeros(&xs);
                let d = dx.data_mut();
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, dx, grads);
            }
            Op::Embedding { table, indices } => {
                let ts = self.shape(*table).to_vec();
                let e = ts[1];
                let mut dt = Tensor::zeros(&ts);
                let d = dt.data_mut();
                for (row, &idx) in indices.iter().enumerate() {
                    for j in 0..e {
                        d[idx * e + j] = d[idx * e + j] + gd[row * e + j];
                    }
                }
                send(*table, dt, grads);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// One step of an LSTM cell.
///
/// `x` is `[1,I]`, `h`/`c` are `[1,H]`, `w_ih` is `[I,4H]`, `w_hh` is
/// `[H,4H]`, `bias` is `[1,4H]`. Gate order: input, forget, cell, output.
pub fn lstm_step<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    h: Var,
    c: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let hidden = tape.shape(h)[1];
    let xi = tape.matmul(x, w_ih)?;
    let hh = tape.matmul(h, w_hh)?;
    let pre = tape.add(xi, hh)?;
    let pre = tape.add(pre, bias)?;
    let gate = |tape: &mut Tape<T>, k: usize| tape.slice(pre, 1, k * hidden, hidden);
    let i_raw = gate(tape, 0)?;
    let f_raw = gate(tape, 1)?;
    let g_raw = gate(tape, 2)?;
    let o_raw = gate(tape, 3)?;
    let i = tape.sigmoid(i_raw);
    let f = tape.sigmoid(f_raw);
    let g = tape.tanh(g_raw);
    let o = tape.sigmoid(o_raw);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}
