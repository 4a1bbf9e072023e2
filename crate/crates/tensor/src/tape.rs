//! Tape-based reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node holding its output and
//! the ids of its inputs. [`Tape::backward`] walks the nodes once, newest first,
//! and accumulates vector-Jacobian products into per-node gradient slots.
//! Nodes are only ever appended, so ids are a topological order.

use std::cell::{Ref, RefCell};

use crate::element::{gemm, Element};
use crate::error::{dim_err, Result, TensorError};
use crate::shape::{
    broadcast_offsets, broadcast_shapes, numel, resolve_axis, split_at_axis, strided_offsets,
    strides,
};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Abs,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    Shift(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow { src: Var, axis: usize, start: usize },
    Sum(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    IndexSelect(Var, Vec<usize>),
    BroadcastTo(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients produced by one reverse sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
    visited: usize,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node and its buffers.
    pub fn clear(&self) {
        let mut nodes = self.nodes.borrow_mut();
        nodes.clear();
        nodes.shrink_to_fit();
    }

    fn push(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, data, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf; it takes part in differentiation when its
    /// `requires_grad` flag is set.
    pub fn leaf(&self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a tensor as a leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn data(&self, v: Var) -> Ref<'_, [T]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].data.as_slice())
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    /// The single value of a one-element tensor.
    pub fn item(&self, v: Var) -> Result<T> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        if n.data.len() != 1 {
            return Err(TensorError::Usage(format!(
                "item() on tensor of shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    // ----- elementwise -----------------------------------------------------

    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let f = |x: T, y: T| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            };
            if na.shape == nb.shape {
                let data = na.data.iter().zip(&nb.data).map(|(&x, &y)| f(x, y)).collect();
                (na.shape.clone(), data)
            } else {
                let shape = broadcast_shapes(&na.shape, &nb.shape)?;
                let data = if nb.shape == shape {
                    let oa = broadcast_offsets(&na.shape, &shape);
                    oa.iter().zip(&nb.data).map(|(&i, &y)| f(na.data[i], y)).collect()
                } else if na.shape == shape {
                    let ob = broadcast_offsets(&nb.shape, &shape);
                    na.data.iter().zip(&ob).map(|(&x, &j)| f(x, nb.data[j])).collect()
                } else {
                    let oa = broadcast_offsets(&na.shape, &shape);
                    let ob = broadcast_offsets(&nb.shape, &shape);
                    oa.iter().zip(&ob).map(|(&i, &j)| f(na.data[i], nb.data[j])).collect()
                };
                (shape, data)
            }
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape, data, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&self, kind: Unary, x: Var) -> Var {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let data = n
                .data
                .iter()
                .map(|&v| match kind {
                    Unary::Tanh => v.tanh(),
                    Unary::Sigmoid => sigmoid(v),
                    Unary::Relu => {
                        if v > T::zero() {
                            v
                        } else {
                            T::zero()
                        }
                    }
                    Unary::Abs => v.abs(),
                })
                .collect();
            (n.shape.clone(), data)
        };
        let rg = self.needs(&[x]);
        self.push(shape, data, Op::Unary(kind, x), rg)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    /// `c·x`
    pub fn scale(&self, x: Var, c: T) -> Var {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.shape.clone(), n.data.iter().map(|&v| v * c).collect())
        };
        let rg = self.needs(&[x]);
        self.push(shape, data, Op::Scale(x, c), rg)
    }

    /// `x + c`
    pub fn shift(&self, x: Var, c: T) -> Var {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.shape.clone(), n.data.iter().map(|&v| v + c).collect())
        };
        let rg = self.needs(&[x]);
        self.push(shape, data, Op::Shift(x), rg)
    }

    // ----- linear algebra --------------------------------------------------

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let plan = MatMulPlan::new(&na.shape, &nb.shape)?;
            let mut out = vec![T::zero(); numel(&plan.out_shape)];
            plan.forward(&na.data, &nb.data, &mut out);
            (plan.out_shape, out)
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape, data, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let rank = self.nodes.borrow()[x.0].shape.len();
        if rank < 2 {
            return dim_err(format!("transpose needs rank >= 2, got {rank}"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            check_perm(perm, n.shape.len())?;
            let src_strides = strides(&n.shape);
            let out_shape: Vec<usize> = perm.iter().map(|&p| n.shape[p]).collect();
            let walk: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
            let data = strided_offsets(&out_shape, &walk).into_iter().map(|i| n.data[i]).collect();
            (out_shape, data)
        };
        let rg = self.needs(&[x]);
        Ok(self.push(shape, data, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            if numel(shape) != n.data.len() {
                return dim_err(format!("cannot reshape {:?} to {shape:?}", n.shape));
            }
            n.data.clone()
        };
        let rg = self.needs(&[x]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    // ----- structural ------------------------------------------------------

    pub fn concat(&self, xs: &[Var], axis: isize) -> Result<Var> {
        if xs.is_empty() {
            return dim_err("concat of zero tensors");
        }
        let (shape, data, axis) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[xs[0].0].shape;
            let axis = resolve_axis(axis, first.len())?;
            let mut total = 0;
            for v in xs {
                let s = &nodes[v.0].shape;
                let same_rank = s.len() == first.len();
                if !same_rank || (0..s.len()).any(|d| d != axis && s[d] != first[d]) {
                    return dim_err(format!(
                        "concat along axis {axis}: shape {s:?} does not match {first:?}"
                    ));
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = split_at_axis(&shape, axis);
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for v in xs {
                    let n = &nodes[v.0];
                    let block = n.shape[axis] * inner;
                    data.extend_from_slice(&n.data[o * block..(o + 1) * block]);
                }
            }
            (shape, data, axis)
        };
        let rg = self.needs(xs);
        Ok(self.push(shape, data, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: isize, start: usize, len: usize) -> Result<Var> {
        let (shape, data, axis) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let axis = resolve_axis(axis, n.shape.len())?;
            if start + len > n.shape[axis] {
                return dim_err(format!(
                    "narrow [{start}, {}) exceeds axis {axis} of {:?}",
                    start + len,
                    n.shape
                ));
            }
            let (outer, alen, inner) = split_at_axis(&n.shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * alen + start) * inner;
                data.extend_from_slice(&n.data[base..base + len * inner]);
            }
            let mut shape = n.shape.clone();
            shape[axis] = len;
            (shape, data, axis)
        };
        let rg = self.needs(&[x]);
        Ok(self.push(shape, data, Op::Narrow { src: x, axis, start }, rg))
    }

    /// Gathers slices of `x` along axis 0.
    pub fn index_select(&self, x: Var, indices: &[usize]) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            if n.shape.is_empty() {
                return dim_err("index_select on a rank-0 tensor");
            }
            let rows = n.shape[0];
            let inner = numel(&n.shape[1..]);
            let mut data = Vec::with_capacity(indices.len() * inner);
            for &i in indices {
                if i >= rows {
                    return Err(TensorError::Lookup(format!(
                        "index {i} out of range for table with {rows} rows"
                    )));
                }
                data.extend_from_slice(&n.data[i * inner..(i + 1) * inner]);
            }
            let mut shape = n.shape.clone();
            shape[0] = indices.len();
            (shape, data)
        };
        let rg = self.needs(&[x]);
        Ok(self.push(shape, data, Op::IndexSelect(x, indices.to_vec()), rg))
    }

    pub fn broadcast_to(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let target = broadcast_shapes(&n.shape, shape)?;
            if target != shape {
                return dim_err(format!("cannot broadcast {:?} to {shape:?}", n.shape));
            }
            broadcast_offsets(&n.shape, shape).into_iter().map(|i| n.data[i]).collect()
        };
        let rg = self.needs(&[x]);
        Ok(self.push(shape.to_vec(), data, Op::BroadcastTo(x), rg))
    }

    // ----- reductions ------------------------------------------------------

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&self, x: Var) -> Var {
        let total = {
            let nodes = self.nodes.borrow();
            nodes[x.0].data.iter().copied().sum::<T>()
        };
        let rg = self.needs(&[x]);
        self.push(vec![1], vec![total], Op::Sum(x), rg)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&self, x: Var, axis: isize) -> Result<Var> {
        let (shape, data, axis) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let axis = resolve_axis(axis, n.shape.len())?;
            let (outer, alen, inner) = split_at_axis(&n.shape, axis);
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for a in 0..alen {
                    let src = &n.data[(o * alen + a) * inner..(o * alen + a + 1) * inner];
                    for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = n.shape.clone();
            shape[axis] = 1;
            (shape, data, axis)
        };
        let rg = self.needs(&[x]);
        Ok(self.push(shape, data, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&self, x: Var, axis: isize) -> Result<Var> {
        let rank = self.nodes.borrow()[x.0].shape.len();
        let len = self.nodes.borrow()[x.0].shape[resolve_axis(axis, rank)?];
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::of(len as f64)))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: isize) -> Result<Var> {
        let (shape, data, axis) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let axis = resolve_axis(axis, n.shape.len())?;
            let (outer, alen, inner) = split_at_axis(&n.shape, axis);
            let mut data = vec![T::zero(); n.data.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * alen + a) * inner + i;
                    let mut mx = T::neg_infinity();
                    for a in 0..alen {
                        mx = mx.max(n.data[at(a)]);
                    }
                    let mut z = T::zero();
                    for a in 0..alen {
                        let e = (n.data[at(a)] - mx).exp();
                        data[at(a)] = e;
                        z += e;
                    }
                    for a in 0..alen {
                        data[at(a)] = data[at(a)] / z;
                    }
                }
            }
            (n.shape.clone(), data, axis)
        };
        let rg = self.needs(&[x]);
        Ok(self.push(shape, data, Op::Softmax(x, axis), rg))
    }

    // ----- reverse sweep ---------------------------------------------------

    /// Propagates d(root)/d(node) to every node that requires a gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].data.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward from non-scalar of shape {:?}",
                nodes[root.0].shape
            )));
        }
        let mut slots: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = slots[id].take() else { continue };
            visited += 1;
            backprop(&nodes, node, &g, &mut slots)?;
            slots[id] = Some(g);
        }
        Ok(Gradients { slots, visited })
    }
}

fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return dim_err(format!("permutation {perm:?} for rank {rank}"));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return dim_err(format!("invalid permutation {perm:?}"));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Zero-initialised gradient slot for `v`, or `None` when `v` is inert.
fn slot<'a, T: Element>(
    nodes: &[Node<T>],
    slots: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].data.len();
    Some(slots[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

/// Accumulates `g` (shaped like `out`) into `dst` (shaped `src`), summing over
/// broadcast axes.
fn reduce_into<T: Element>(dst: &mut [T], src: &[usize], out: &[usize], g: &[T], f: impl Fn(usize, T) -> T) {
    if src == out {
        for (i, (d, &gv)) in dst.iter_mut().zip(g).enumerate() {
            *d += f(i, gv);
        }
    } else {
        for (i, (&o, &gv)) in broadcast_offsets(src, out).iter().zip(g).enumerate() {
            dst[o] += f(i, gv);
        }
    }
}

fn backprop<T: Element>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    slots: &mut [Option<Vec<T>>],
) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let out = &node.shape;
            let oa = (na.shape != *out).then(|| broadcast_offsets(&na.shape, out));
            let ob = (nb.shape != *out).then(|| broadcast_offsets(&nb.shape, out));
            let av = |i: usize| na.data[oa.as_ref().map_or(i, |o| o[i])];
            let bv = |i: usize| nb.data[ob.as_ref().map_or(i, |o| o[i])];
            if let Some(ga) = slot(nodes, slots, *a) {
                match kind {
                    Binary::Add | Binary::Sub => reduce_into(ga, &na.shape, out, g, |_, x| x),
                    Binary::Mul => reduce_into(ga, &na.shape, out, g, |i, x| x * bv(i)),
                    Binary::Div => reduce_into(ga, &na.shape, out, g, |i, x| x / bv(i)),
                }
            }
            if let Some(gb) = slot(nodes, slots, *b) {
                match kind {
                    Binary::Add => reduce_into(gb, &nb.shape, out, g, |_, x| x),
                    Binary::Sub => reduce_into(gb, &nb.shape, out, g, |_, x| -x),
                    Binary::Mul => reduce_into(gb, &nb.shape, out, g, |i, x| x * av(i)),
                    Binary::Div => reduce_into(gb, &nb.shape, out, g, |i, x| {
                        let d = bv(i);
                        -x * av(i) / (d * d)
                    }),
                }
            }
        }
        Op::Unary(kind, x) => {
            let nx = &nodes[x.0];
            if let Some(gx) = slot(nodes, slots, *x) {
                let y = &node.data;
                for i in 0..g.len() {
                    gx[i] += match kind {
                        Unary::Tanh => g[i] * (T::one() - y[i] * y[i]),
                        Unary::Sigmoid => g[i] * y[i] * (T::one() - y[i]),
                        Unary::Relu => {
                            if nx.data[i] > T::zero() {
                                g[i]
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Abs => {
                            let v = nx.data[i];
                            if v > T::zero() {
                                g[i]
                            } else if v < T::zero() {
                                -g[i]
                            } else {
                                T::zero()
                            }
                        }
                    };
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = slot(nodes, slots, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *c);
            }
        }
        Op::Shift(x) | Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, slots, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
        }
        Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let plan = MatMulPlan::new(&na.shape, &nb.shape)?;
            if let Some(ga) = slot(nodes, slots, *a) {
                plan.grad_lhs(g, &nb.data, ga);
            }
            if let Some(gb) = slot(nodes, slots, *b) {
                plan.grad_rhs(&na.data, g, gb);
            }
        }
        Op::Permute(x, perm) => {
            let nx = &nodes[x.0];
            if let Some(gx) = slot(nodes, slots, *x) {
                let src_strides = strides(&nx.shape);
                let walk: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
                for (&o, &v) in strided_offsets(&node.shape, &walk).iter().zip(g) {
                    gx[o] += v;
                }
            }
        }
        Op::Concat(xs, axis) => {
            let (outer, _, inner) = split_at_axis(&node.shape, *axis);
            let mut offset = 0;
            for v in xs {
                let width = nodes[v.0].shape[*axis] * inner;
                if let Some(gx) = slot(nodes, slots, *v) {
                    let total = node.shape[*axis] * inner;
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + width];
                        for (d, &s) in gx[o * width..(o + 1) * width].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += width;
            }
        }
        Op::Narrow { src, axis, start } => {
            let ns = &nodes[src.0];
            if let Some(gx) = slot(nodes, slots, *src) {
                let (outer, alen, inner) = split_at_axis(&ns.shape, *axis);
                let len = node.shape[*axis];
                for o in 0..outer {
                    let base = (o * alen + start) * inner;
                    let dst = &mut gx[base..base + len * inner];
                    for (d, &s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *d += s;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, slots, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SumAxis(x, axis) => {
            let nx = &nodes[x.0];
            if let Some(gx) = slot(nodes, slots, *x) {
                let (outer, alen, inner) = split_at_axis(&nx.shape, *axis);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for a in 0..alen {
                        let base = (o * alen + a) * inner;
                        for (d, &s) in gx[base..base + inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Op::Softmax(x, axis) => {
            if let Some(gx) = slot(nodes, slots, *x) {
                let y = &node.data;
                let (outer, alen, inner) = split_at_axis(&node.shape, *axis);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * alen + a) * inner + i;
                        let mut dot = T::zero();
                        for a in 0..alen {
                            dot += g[at(a)] * y[at(a)];
                        }
                        for a in 0..alen {
                            gx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
            }
        }
        Op::IndexSelect(x, indices) => {
            let nx = &nodes[x.0];
            if let Some(gx) = slot(nodes, slots, *x) {
                let inner = numel(&nx.shape[1..]);
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut gx[i * inner..(i + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(&g[r * inner..(r + 1) * inner]) {
                        *d += s;
                    }
                }
            }
        }
        Op::BroadcastTo(x) => {
            let nx = &nodes[x.0];
            if let Some(gx) = slot(nodes, slots, *x) {
                reduce_into(gx, &nx.shape, &node.shape, g, |_, v| v);
            }
        }
    }
    Ok(())
}

/// Batch layout of a (possibly broadcast) matrix product.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// `Some` when the rhs is a plain matrix and the lhs batch folds into rows.
    folded_rows: Option<usize>,
    lhs_batch: Vec<usize>,
    rhs_batch: Vec<usize>,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return dim_err(format!("matmul needs rank >= 2 operands, got {a:?} x {b:?}"));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return dim_err(format!("matmul inner dimensions differ: {a:?} x {b:?}"));
        }
        let ba = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch = broadcast_shapes(ba, bb).map_err(|_| {
            TensorError::Dimension(format!("matmul batch dimensions differ: {a:?} x {b:?}"))
        })?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        if bb.is_empty() {
            return Ok(Self {
                m,
                k,
                n,
                out_shape,
                folded_rows: Some(numel(ba) * m),
                lhs_batch: vec![],
                rhs_batch: vec![],
            });
        }
        Ok(Self {
            m,
            k,
            n,
            lhs_batch: broadcast_offsets(ba, &batch),
            rhs_batch: broadcast_offsets(bb, &batch),
            out_shape,
            folded_rows: None,
        })
    }

    fn forward<T: Element>(&self, a: &[T], b: &[T], c: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(rows) = self.folded_rows {
            gemm(rows, k, n, (a, k, 1), (b, n, 1), T::zero(), c);
            return;
        }
        for (i, (&ia, &ib)) in self.lhs_batch.iter().zip(&self.rhs_batch).enumerate() {
            gemm(
                m,
                k,
                n,
                (&a[ia * m * k..(ia + 1) * m * k], k, 1),
                (&b[ib * k * n..(ib + 1) * k * n], n, 1),
                T::zero(),
                &mut c[i * m * n..(i + 1) * m * n],
            );
        }
    }

    /// `dA += dC·Bᵀ`
    fn grad_lhs<T: Element>(&self, gc: &[T], b: &[T], ga: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(rows) = self.folded_rows {
            gemm(rows, n, k, (gc, n, 1), (b, 1, n), T::one(), ga);
            return;
        }
        for (i, (&ia, &ib)) in self.lhs_batch.iter().zip(&self.rhs_batch).enumerate() {
            gemm(
                m,
                n,
                k,
                (&gc[i * m * n..(i + 1) * m * n], n, 1),
                (&b[ib * k * n..(ib + 1) * k * n], 1, n),
                T::one(),
                &mut ga[ia * m * k..(ia + 1) * m * k],
            );
        }
    }

    /// `dB += Aᵀ·dC`
    fn grad_rhs<T: Element>(&self, a: &[T], gc: &[T], gb: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(rows) = self.folded_rows {
            gemm(k, rows, n, (a, 1, k), (gc, n, 1), T::one(), gb);
            return;
        }
        for (i, (&ia, &ib)) in self.lhs_batch.iter().zip(&self.rhs_batch).enumerate() {
            gemm(
                k,
                m,
                n,
                (&a[ia * m * k..(ia + 1) * m * k], 1, k),
                (&gc[i * m * n..(i + 1) * m * n], n, 1),
                T::one(),
                &mut gb[ib * k * n..(ib + 1) * k * n],
            );
        }
    }
}
