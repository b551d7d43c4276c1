//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! returns gradients for every parameter bound into the graph. A graph can
//! be differentiated once; a second call is rejected.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::diff::kernels::{self, ConvGeom, NormCache};
use crate::diff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

type NodeId = usize;

enum Op<T> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    InstanceNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: NormCache<T> },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax { x: NodeId, axis: usize },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    AvgPool { x: NodeId, k: usize },
    GlobalAvgPool(NodeId),
    Bilinear(NodeId),
    Nearest { x: NodeId, factor: usize },
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, s: T },
    AddScalar(NodeId),
    Powf { x: NodeId, p: T },
    Concat { xs: Vec<NodeId> },
    Reshape(NodeId),
    Transpose(NodeId),
    SumAxis { x: NodeId, axis: usize },
    MeanStack(Vec<NodeId>),
    Mean(NodeId),
    L1 { a: NodeId, b: NodeId },
    Mse { a: NodeId, b: NodeId },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<ParamId, NodeId>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: NodeId,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a bound parameter; `None` if it did not influence the output.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient for a leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&v.id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::shape(op, detail)
}

/// Dimensions of a left operand padded to rank 4, plus broadcast strides of the right operand.
fn broadcast_plan(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<([usize; 4], [usize; 4])> {
    if lhs.len() != rhs.len() || lhs.len() > 4 {
        return Err(shape_err(op, format!("cannot broadcast {rhs:?} onto {lhs:?}")));
    }
    let pad = 4 - lhs.len();
    let mut dims = [1usize; 4];
    let mut rdims = [1usize; 4];
    for i in 0..lhs.len() {
        if rhs[i] != lhs[i] && rhs[i] != 1 {
            return Err(shape_err(op, format!("cannot broadcast {rhs:?} onto {lhs:?}")));
        }
        dims[pad + i] = lhs[i];
        rdims[pad + i] = rhs[i];
    }
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        strides[i] = if rdims[i] == 1 { 0 } else { acc };
        acc *= rdims[i];
    }
    Ok((dims, strides))
}

fn for_each_bcast(dims: [usize; 4], rs: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let mut li = 0;
    for a in 0..dims[0] {
        for b in 0..dims[1] {
            for c in 0..dims[2] {
                let base = a * rs[0] + b * rs[1] + c * rs[2];
                for d in 0..dims[3] {
                    f(li, base + d * rs[3]);
                    li += 1;
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), bound: RefCell::new(HashMap::new()), consumed: Cell::new(false) }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn val(&self, id: NodeId) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.input(Tensor::full(&[1], v))
    }

    /// Binds a trainable parameter. Repeated binds return the same node so
    /// shared weights accumulate gradient.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.bound.borrow_mut().insert(id, v.id);
        v
    }

    /// Channel-axis (axis 0) concatenation.
    pub fn concat<'g>(&'g self, xs: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = xs.first().ok_or_else(|| shape_err("concat", "empty input list".into()))?;
        let s0 = first.shape();
        let mut data = Vec::new();
        let mut c = 0;
        for x in xs {
            let v = x.value();
            if v.shape().len() != s0.len() || v.shape()[1..] != s0[1..] {
                return Err(shape_err("concat", format!("{:?} vs {:?}", v.shape(), s0)));
            }
            c += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = s0.clone();
        shape[0] = c;
        let ng = xs.iter().any(|x| self.ng(x.id));
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Concat { xs: xs.iter().map(|x| x.id).collect() }, ng))
    }

    /// Elementwise mean of equally shaped tensors. Each element is summed in
    /// sorted order, so the result is bit-identical under any permutation of `xs`.
    pub fn mean_stack<'g>(&'g self, xs: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = xs.first().ok_or_else(|| shape_err("mean_over_axis", "empty input list".into()))?;
        let shape = first.shape();
        let vals: Vec<Rc<Tensor<T>>> = xs.iter().map(|x| x.value()).collect();
        for v in &vals {
            if v.shape() != &shape[..] {
                return Err(shape_err("mean_over_axis", format!("{:?} vs {:?}", v.shape(), shape)));
            }
        }
        let n = T::c(xs.len() as f64);
        let mut buf = Vec::with_capacity(xs.len());
        let data = (0..first.value().numel())
            .map(|i| {
                buf.clear();
                buf.extend(vals.iter().map(|v| v.data()[i]));
                buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                buf.iter().copied().sum::<T>() / n
            })
            .collect();
        let ng = xs.iter().any(|x| self.ng(x.id));
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::MeanStack(xs.iter().map(|x| x.id).collect()), ng))
    }

    /// Reverse pass from a single-element output. Consumes the trace.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::TraceConsumed);
        }
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("output must be scalar, got shape {:?}", nodes[output.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![T::one()]);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
        }

        let bound = self.bound.borrow();
        let mut params = HashMap::new();
        for (&pid, &nid) in bound.iter() {
            if let Some(g) = grads[nid].take() {
                params.insert(pid, Tensor::from_vec(nodes[nid].value.shape(), g)?);
            }
        }
        let mut leaves = HashMap::new();
        for (nid, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(nodes[nid].op, Op::Leaf) {
                    leaves.insert(nid, Tensor::from_vec(nodes[nid].value.shape(), g)?);
                }
            }
        }
        Ok(Gradients { params, leaves })
    }
}

fn grad_buf<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], id: NodeId) -> Option<&'a mut Vec<T>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

/// Two distinct gradient buffers at once (`a != b`).
fn grad_pair<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    a: NodeId,
    b: NodeId,
) -> (Option<&'a mut Vec<T>>, Option<&'a mut Vec<T>>) {
    assert_ne!(a, b);
    for &i in &[a, b] {
        if nodes[i].needs_grad && grads[i].is_none() {
            grads[i] = Some(vec![T::zero(); nodes[i].value.numel()]);
        }
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let (left, right) = grads.split_at_mut(hi);
    let glo = if nodes[lo].needs_grad { left[lo].as_mut() } else { None };
    let ghi = if nodes[hi].needs_grad { right[0].as_mut() } else { None };
    if a < b {
        (glo, ghi)
    } else {
        (ghi, glo)
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            let xv = nodes[*x].value.clone();
            let wv = nodes[*w].value.clone();
            if let Some(b) = b {
                if let Some(db) = grad_buf(nodes, grads, *b) {
                    for (co, chunk) in g.chunks(g.len() / geom.c_out).enumerate() {
                        db[co] += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            let (dx, dw) = if x == w { (None, grad_buf(nodes, grads, *w)) } else { grad_pair(nodes, grads, *x, *w) };
            kernels::conv2d_backward(
                xv.data(),
                wv.data(),
                g,
                geom,
                dx.map(|v| v.as_mut_slice()),
                dw.map(|v| v.as_mut_slice()),
                None,
            );
        }
        Op::InstanceNorm { x, gamma, beta, cache } => {
            let (c, hw) = {
                let s = nodes[*x].value.shape();
                (s[0], s[1..].iter().product())
            };
            let gam = nodes[*gamma].value.clone();
            if let Some(db) = grad_buf(nodes, grads, *beta) {
                kernels::instance_norm_backward(g, cache, c, hw, gam.data(), None, None, Some(db));
            }
            if let Some(dg) = grad_buf(nodes, grads, *gamma) {
                kernels::instance_norm_backward(g, cache, c, hw, gam.data(), None, Some(dg), None);
            }
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                kernels::instance_norm_backward(g, cache, c, hw, gam.data(), Some(dx), None, None);
            }
        }
        Op::Relu(x) => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y.data()) {
                    if yi > T::zero() {
                        *d += gi;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y.data()) {
                    *d += gi * yi * (T::one() - yi);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y.data()) {
                    *d += gi * (T::one() - yi * yi);
                }
            }
        }
        Op::Softmax { x, axis } => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                kernels::softmax_backward(y.data(), g, y.shape(), *axis, dx);
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for (&i, &gi) in argmax.iter().zip(g) {
                    dx[i] += gi;
                }
            }
        }
        Op::AvgPool { x, k } => {
            let s = nodes[*x].value.shape().to_vec();
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                kernels::avg_pool_backward(g, s[0], s[1], s[2], *k, dx);
            }
        }
        Op::GlobalAvgPool(x) => {
            let s = nodes[*x].value.shape().to_vec();
            let hw = s[1] * s[2];
            let inv = T::one() / T::c(hw as f64);
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for (c, chunk) in dx.chunks_mut(hw).enumerate() {
                    let gc = g[c] * inv;
                    chunk.iter_mut().for_each(|d| *d += gc);
                }
            }
        }
        Op::Bilinear(x) => {
            let s = nodes[*x].value.shape().to_vec();
            let (oh, ow) = (y.shape()[1], y.shape()[2]);
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                kernels::bilinear_backward(g, s[0], s[1], s[2], oh, ow, dx);
            }
        }
        Op::Nearest { x, factor } => {
            let s = nodes[*x].value.shape().to_vec();
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                kernels::nearest_backward(g, s[0], s[1], s[2], *factor, dx);
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            let (ar, ac) = (av.shape()[0], av.shape()[1]);
            let (br, bc) = (bv.shape()[0], bv.shape()[1]);
            let opa = if *ta { MatRef::new(av.data(), ar, ac).t() } else { MatRef::new(av.data(), ar, ac) };
            let opb = if *tb { MatRef::new(bv.data(), br, bc).t() } else { MatRef::new(bv.data(), br, bc) };
            let gm = MatRef::new(g, opa.rows, opb.cols);
            let (da, db) = if a == b {
                // a·a or a·aᵀ: accumulate both contributions into one buffer
                let mut tmp = vec![T::zero(); av.numel()];
                matmul_grads(opa, opb, gm, *ta, *tb, Some(&mut tmp), None);
                matmul_grads(opa, opb, gm, *ta, *tb, None, Some(&mut tmp));
                if let Some(d) = grad_buf(nodes, grads, *a) {
                    d.iter_mut().zip(&tmp).for_each(|(d, t)| *d += *t);
                }
                return;
            } else {
                grad_pair(nodes, grads, *a, *b)
            };
            matmul_grads(opa, opb, gm, *ta, *tb, da.map(|v| v.as_mut_slice()), db.map(|v| v.as_mut_slice()));
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let neg = matches!(node.op, Op::Sub { .. });
            let bshape = nodes[*b].value.shape().to_vec();
            if let Some(da) = grad_buf(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
            }
            let (dims, rs) = broadcast_plan("add", y.shape(), &bshape).expect("validated in forward");
            if let Some(db) = grad_buf(nodes, grads, *b) {
                for_each_bcast(dims, rs, |li, ri| {
                    if neg {
                        db[ri] -= g[li];
                    } else {
                        db[ri] += g[li];
                    }
                });
            }
        }
        Op::Mul { a, b } => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            let (dims, rs) = broadcast_plan("mul", av.shape(), bv.shape()).expect("validated in forward");
            if a == b {
                if let Some(d) = grad_buf(nodes, grads, *a) {
                    for i in 0..d.len() {
                        d[i] += T::c(2.0) * g[i] * av.data()[i];
                    }
                }
                return;
            }
            let (da, db) = grad_pair(nodes, grads, *a, *b);
            if let Some(da) = da {
                for_each_bcast(dims, rs, |li, ri| da[li] += g[li] * bv.data()[ri]);
            }
            if let Some(db) = db {
                for_each_bcast(dims, rs, |li, ri| db[ri] += g[li] * av.data()[li]);
            }
        }
        Op::Scale { x, s } => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *s);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
            }
        }
        Op::Powf { x, p } => {
            let xv = nodes[*x].value.clone();
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for i in 0..dx.len() {
                    dx[i] += g[i] * *p * xv.data()[i].powf(*p - T::one());
                }
            }
        }
        Op::Concat { xs } => {
            let mut off = 0;
            for &x in xs {
                let n = nodes[x].value.numel();
                if let Some(dx) = grad_buf(nodes, grads, x) {
                    dx.iter_mut().zip(&g[off..off + n]).for_each(|(d, &gi)| *d += gi);
                }
                off += n;
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (y.shape()[0], y.shape()[1]);
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                // y is r×c, x is c×r
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::SumAxis { x, axis } => {
            let s = nodes[*x].value.shape().to_vec();
            let (outer, n, inner) = kernels::split_axis(&s, *axis);
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            dx[(o * n + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::MeanStack(xs) => {
            let inv = T::one() / T::c(xs.len() as f64);
            for &x in xs {
                if let Some(dx) = grad_buf(nodes, grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * inv);
                }
            }
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.numel();
            let gi = g[0] / T::c(n as f64);
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += gi);
            }
        }
        Op::L1 { a, b } | Op::Mse { a, b } => {
            let l1 = matches!(node.op, Op::L1 { .. });
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            let n = T::c(av.numel() as f64);
            let local: Vec<T> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&p, &q)| {
                    let d = p - q;
                    let dd = if l1 {
                        if d > T::zero() {
                            T::one()
                        } else if d < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    } else {
                        T::c(2.0) * d
                    };
                    dd * g[0] / n
                })
                .collect();
            if a == b {
                return;
            }
            let (da, db) = grad_pair(nodes, grads, *a, *b);
            if let Some(da) = da {
                da.iter_mut().zip(&local).for_each(|(d, &l)| *d += l);
            }
            if let Some(db) = db {
                db.iter_mut().zip(&local).for_each(|(d, &l)| *d -= l);
            }
        }
    }
}

fn matmul_grads<T: Scalar>(
    opa: MatRef<'_, T>,
    opb: MatRef<'_, T>,
    g: MatRef<'_, T>,
    ta: bool,
    tb: bool,
    da: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(da) = da {
        if ta {
            gemm(opb, g.t(), T::one(), da);
        } else {
            gemm(g, opb.t(), T::one(), da);
        }
    }
    if let Some(db) = db {
        if tb {
            gemm(g.t(), opa, T::one(), db);
        } else {
            gemm(opa.t(), g, T::one(), db);
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        self.graph.push(value, op, self.graph.ng(self.id))
    }

    fn rank3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape()[..] {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(shape_err(op, format!("expected C×H×W input, got {s:?}"))),
        }
    }

    /// Cross-correlation with weight `[C_out, C_in, k, k]` and optional bias `[C_out]`.
    pub fn conv2d(&self, w: Var<'g, T>, b: Option<Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let (c_in, h, wd) = self.rank3("conv2d")?;
        let ws = w.shape();
        if ws.len() != 4 || ws[1] != c_in || ws[2] != ws[3] {
            return Err(shape_err("conv2d", format!("weight {ws:?} incompatible with input channels {c_in}")));
        }
        if let Some(b) = &b {
            if b.shape() != [ws[0]] {
                return Err(shape_err("conv2d", format!("bias {:?} for {} output channels", b.shape(), ws[0])));
            }
        }
        if stride == 0 || h + 2 * pad < ws[2] || wd + 2 * pad < ws[2] {
            return Err(shape_err("conv2d", format!("kernel {} stride {stride} on {h}×{wd}", ws[2])));
        }
        let geom = ConvGeom { c_in, h, w: wd, c_out: ws[0], k: ws[2], stride, pad };
        let xv = self.value();
        let wv = w.value();
        let bv = b.map(|b| b.value());
        let out = kernels::conv2d_forward(xv.data(), wv.data(), bv.as_ref().map(|t| t.data()), &geom);
        let (oh, ow) = geom.out_hw();
        let ng = self.graph.ng(self.id) || self.graph.ng(w.id) || b.is_some_and(|b| self.graph.ng(b.id));
        Ok(self.graph.push(
            Tensor::from_vec(&[geom.c_out, oh, ow], out)?,
            Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), geom },
            ng,
        ))
    }

    /// Per-channel normalization with affine `gamma`, `beta` of shape `[C]`.
    pub fn instance_norm(&self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let (c, h, w) = self.rank3("instance_norm")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err(
                "instance_norm",
                format!("affine {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
            ));
        }
        let xv = self.value();
        let (y, cache) =
            kernels::instance_norm_forward(xv.data(), c, h * w, gamma.value().data(), beta.value().data(), T::c(eps));
        let ng = [self.id, gamma.id, beta.id].iter().any(|&i| self.graph.ng(i));
        Ok(self.graph.push(
            Tensor::from_vec(&[c, h, w], y)?,
            Op::InstanceNorm { x: self.id, gamma: gamma.id, beta: beta.id, cache },
            ng,
        ))
    }

    pub fn relu(&self) -> Var<'g, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        let v = self.value().map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'g, T> {
        let v = self.value().map(|x| x.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    /// Softmax along an explicitly named axis.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g, T>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let y = kernels::softmax_forward(self.value().data(), &s, axis);
        Ok(self.unary(Tensor::from_vec(&s, y)?, Op::Softmax { x: self.id, axis }))
    }

    fn check_pool(&self, op: &'static str, k: usize) -> Result<(usize, usize, usize)> {
        let (c, h, w) = self.rank3(op)?;
        if k == 0 || h < k || w < k {
            return Err(shape_err(op, format!("window {k} on {h}×{w}")));
        }
        Ok((c, h, w))
    }

    /// Non-overlapping max pooling (floor division of the spatial size).
    pub fn max_pool(&self, k: usize) -> Result<Var<'g, T>> {
        let (c, h, w) = self.check_pool("max_pool", k)?;
        let (y, argmax) = kernels::max_pool_forward(self.value().data(), c, h, w, k);
        Ok(self.unary(Tensor::from_vec(&[c, h / k, w / k], y)?, Op::MaxPool { x: self.id, argmax }))
    }

    pub fn avg_pool(&self, k: usize) -> Result<Var<'g, T>> {
        let (c, h, w) = self.check_pool("avg_pool", k)?;
        let y = kernels::avg_pool_forward(self.value().data(), c, h, w, k);
        Ok(self.unary(Tensor::from_vec(&[c, h / k, w / k], y)?, Op::AvgPool { x: self.id, k }))
    }

    /// `C×H×W → C×1×1` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Var<'g, T>> {
        let (c, h, w) = self.rank3("global_avg_pool")?;
        let v = self.value();
        let inv = T::one() / T::c((h * w) as f64);
        let y = v.data().chunks(h * w).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        Ok(self.unary(Tensor::from_vec(&[c, 1, 1], y)?, Op::GlobalAvgPool(self.id)))
    }

    /// Half-pixel-centred bilinear resize to `oh×ow`.
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Result<Var<'g, T>> {
        let (c, h, w) = self.rank3("bilinear_upsample")?;
        if oh == 0 || ow == 0 {
            return Err(shape_err("bilinear_upsample", format!("target {oh}×{ow}")));
        }
        let y = kernels::bilinear_forward(self.value().data(), c, h, w, oh, ow);
        Ok(self.unary(Tensor::from_vec(&[c, oh, ow], y)?, Op::Bilinear(self.id)))
    }

    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<'g, T>> {
        let (c, h, w) = self.rank3("nearest_upsample")?;
        if factor == 0 {
            return Err(shape_err("nearest_upsample", "factor 0".into()));
        }
        let y = kernels::nearest_forward(self.value().data(), c, h, w, factor);
        Ok(self.unary(Tensor::from_vec(&[c, h * factor, w * factor], y)?, Op::Nearest { x: self.id, factor }))
    }

    /// `op(self) · op(other)` for rank-2 operands; `ta`/`tb` transpose first.
    pub fn matmul_t(&self, other: Var<'g, T>, ta: bool, tb: bool) -> Result<Var<'g, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("rank-2 operands required, got {sa:?} and {sb:?}")));
        }
        let av = self.value();
        let bv = other.value();
        let opa = if ta { MatRef::new(av.data(), sa[0], sa[1]).t() } else { MatRef::new(av.data(), sa[0], sa[1]) };
        let opb = if tb { MatRef::new(bv.data(), sb[0], sb[1]).t() } else { MatRef::new(bv.data(), sb[0], sb[1]) };
        if opa.cols != opb.rows {
            return Err(shape_err("matmul", format!("{}×{} · {}×{}", opa.rows, opa.cols, opb.rows, opb.cols)));
        }
        let mut out = vec![T::zero(); opa.rows * opb.cols];
        gemm(opa, opb, T::zero(), &mut out);
        let ng = self.graph.ng(self.id) || self.graph.ng(other.id);
        Ok(self.graph.push(
            Tensor::from_vec(&[opa.rows, opb.cols], out)?,
            Op::MatMul { a: self.id, b: other.id, ta, tb },
            ng,
        ))
    }

    pub fn matmul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_t(other, false, false)
    }

    fn binary(&self, other: Var<'g, T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let av = self.value();
        let bv = other.value();
        let (dims, rs) = broadcast_plan(name, av.shape(), bv.shape())?;
        let mut out = vec![T::zero(); av.numel()];
        for_each_bcast(dims, rs, |li, ri| out[li] = f(av.data()[li], bv.data()[ri]));
        let ng = self.graph.ng(self.id) || self.graph.ng(other.id);
        Ok((Tensor::from_vec(av.shape(), out)?, ng))
    }

    /// Elementwise sum; `other` broadcasts along its unit dimensions.
    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (v, ng) = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.graph.push(v, Op::Add { a: self.id, b: other.id }, ng))
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (v, ng) = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.graph.push(v, Op::Sub { a: self.id, b: other.id }, ng))
    }

    /// Elementwise product; `other` broadcasts along its unit dimensions.
    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (v, ng) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.graph.push(v, Op::Mul { a: self.id, b: other.id }, ng))
    }

    pub fn scale(&self, s: T) -> Var<'g, T> {
        self.unary(self.value().map(|x| x * s), Op::Scale { x: self.id, s })
    }

    pub fn add_scalar(&self, s: T) -> Var<'g, T> {
        self.unary(self.value().map(|x| x + s), Op::AddScalar(self.id))
    }

    pub fn powf(&self, p: T) -> Var<'g, T> {
        self.unary(self.value().map(|x| x.powf(p)), Op::Powf { x: self.id, p })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Var<'g, T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("rank-2 input required, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data()[i * c + j];
            }
        }
        Ok(self.unary(Tensor::from_vec(&[c, r], out)?, Op::Transpose(self.id)))
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(shape_err("mean_over_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = kernels::split_axis(&s, axis);
        let v = self.value();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += v.data()[(o * n + j) * inner + i];
                }
            }
        }
        let mut shape = s.clone();
        shape[axis] = 1;
        Ok(self.unary(Tensor::from_vec(&shape, out)?, Op::SumAxis { x: self.id, axis }))
    }

    /// Mean of all elements as a `[1]` tensor.
    pub fn mean(&self) -> Var<'g, T> {
        let v = self.value();
        let m = v.sum() / T::c(v.numel() as f64);
        self.unary(Tensor::full(&[1], m), Op::Mean(self.id))
    }

    fn pair_loss(&self, target: Var<'g, T>, name: &'static str, l1: bool) -> Result<Var<'g, T>> {
        let (av, bv) = (self.value(), target.value());
        if av.shape() != bv.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let s: T =
            av.data().iter().zip(bv.data()).map(|(&a, &b)| if l1 { (a - b).abs() } else { (a - b) * (a - b) }).sum();
        let v = Tensor::full(&[1], s / T::c(av.numel() as f64));
        let ng = self.graph.ng(self.id) || self.graph.ng(target.id);
        let op = if l1 { Op::L1 { a: self.id, b: target.id } } else { Op::Mse { a: self.id, b: target.id } };
        Ok(self.graph.push(v, op, ng))
    }

    /// Mean absolute difference.
    pub fn l1(&self, target: Var<'g, T>) -> Result<Var<'g, T>> {
        self.pair_loss(target, "l1", true)
    }

    /// Mean squared difference.
    pub fn l2(&self, target: Var<'g, T>) -> Result<Var<'g, T>> {
        self.pair_loss(target, "l2", false)
    }

    /// The single element of a `[1]` tensor.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }
}
