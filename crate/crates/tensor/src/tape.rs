//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and, when any
//! input requires a gradient, the information needed to run its vector-Jacobian
//! product. `backward` walks the tape once from a scalar root; afterwards the
//! tape is consumed until [`Tape::reset`] is called.

use std::cell::{Ref, RefCell};
use std::ptr;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Gelu,
    Silu,
    Exp,
    Sqrt,
    Relu,
    Neg,
}

/// Mapping from output blocks onto a broadcast right-hand operand.
#[derive(Debug)]
struct Bcast {
    offsets: Vec<usize>,
    inner: usize,
}

impl Bcast {
    fn plan(a: &[usize], b: &[usize]) -> Option<Bcast> {
        if b.len() > a.len() {
            return None;
        }
        let pad = a.len() - b.len();
        let full: Vec<usize> = std::iter::repeat(1).take(pad).chain(b.iter().copied()).collect();
        if full.iter().zip(a).any(|(&bd, &ad)| bd != ad && bd != 1) {
            return None;
        }
        // Longest trailing run where both operands agree is contiguous in each.
        let mut split = a.len();
        while split > 0 && full[split - 1] == a[split - 1] {
            split -= 1;
        }
        let inner: usize = a[split..].iter().product();
        let outer_shape = &a[..split];
        let b_strides = strides(&full);
        let n_outer: usize = outer_shape.iter().product();
        let mut offsets = Vec::with_capacity(n_outer);
        let mut idx = vec![0usize; split];
        let mut off = 0usize;
        for _ in 0..n_outer {
            offsets.push(off);
            let mut d = split;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                if full[d] != 1 {
                    off += b_strides[d];
                }
                if idx[d] < outer_shape[d] {
                    break;
                }
                if full[d] != 1 {
                    off -= b_strides[d] * outer_shape[d];
                }
                idx[d] = 0;
            }
        }
        Some(Bcast { offsets, inner })
    }

    /// Calls `f(out_block, b_block)` for each contiguous run of `inner` elements.
    fn for_each_block(&self, mut f: impl FnMut(std::ops::Range<usize>, std::ops::Range<usize>)) {
        for (o, &boff) in self.offsets.iter().enumerate() {
            let base = o * self.inner;
            f(base..base + self.inner, boff..boff + self.inner);
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += src[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// `[outer, axis, inner]` factorisation of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize, Option<Bcast>),
    Sub(usize, usize, Option<Bcast>),
    Mul(usize, usize, Option<Bcast>),
    Scale(usize, T),
    Offset(usize),
    Unary(usize, Unary),
    Clamp(usize, T, T),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
    Max(usize, usize),
    SumAxis {
        a: usize,
        axis: usize,
    },
    Gather(usize, Vec<usize>),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    ReplaceRows {
        a: usize,
        keep: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
struct Inner<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    generation: u64,
    consumed: bool,
}

/// Single-threaded recording of one forward computation.
#[derive(Debug)]
pub struct Tape<T: Element = f32> {
    inner: RefCell<Inner<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
    generation: u64,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                grads: Vec::new(),
                generation: 0,
                consumed: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Drops every node and gradient; outstanding `Var`s become stale.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.grads.clear();
        inner.consumed = false;
        inner.generation += 1;
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    /// Rows of `table` selected by `ids`; shape `[ids.len(), table.cols]`.
    pub fn embedding<'t>(&'t self, table: Var<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        self.check(table)?;
        let (value, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[table.id];
            let shape = node.value.shape();
            if shape.len() != 2 {
                return Err(TensorError::invalid(format!("embedding table must be 2-d, got {shape:?}")));
            }
            let (rows, cols) = (shape[0], shape[1]);
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(TensorError::invalid(format!("embedding id {id} >= {rows}")));
                }
                data.extend_from_slice(&node.value.data()[id * cols..(id + 1) * cols]);
            }
            (Tensor::new(vec![ids.len(), cols], data)?, node.requires_grad)
        };
        self.push(
            value,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat of nothing"));
        }
        for p in parts {
            self.check(*p)?;
        }
        let (value, rg) = {
            let inner = self.inner.borrow();
            let first = inner.nodes[parts[0].id].value.shape().to_vec();
            if axis >= first.len() {
                return Err(TensorError::invalid(format!("concat axis {axis} out of range")));
            }
            let mut total = 0;
            for p in parts {
                let s = inner.nodes[p.id].value.shape();
                let same = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !same {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner_len) = split_axis(&first, axis);
            let mut shape = first.clone();
            shape[axis] = total;
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in parts {
                    let v = &inner.nodes[p.id].value;
                    let block = v.shape()[axis] * inner_len;
                    data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
                }
            }
            let rg = parts.iter().any(|p| inner.nodes[p.id].requires_grad);
            (Tensor::new(shape, data)?, rg)
        };
        self.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// Runs reverse accumulation from a scalar `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Result<()> {
        self.check(root)?;
        let mut guard = self.inner.borrow_mut();
        if guard.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let inner = &mut *guard;
        let root_shape = inner.nodes[root.id].value.shape();
        if numel(root_shape) != 1 {
            return Err(TensorError::NonScalarRoot(root_shape.to_vec()));
        }
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![T::one()]);
        for id in (0..=root.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            propagate(nodes, &mut grads, id, &g);
        }
        inner.grads = grads;
        inner.consumed = true;
        Ok(())
    }

    /// Gradient accumulated into `var` by the last `backward`, if any.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.check(var).ok()?;
        let inner = self.inner.borrow();
        let g = inner.grads.get(var.id)?.as_ref()?;
        let shape = inner.nodes[var.id].value.shape().to_vec();
        Tensor::new(shape, g.clone()).ok()
    }

    fn check(&self, var: Var<'_, T>) -> Result<()> {
        if !ptr::eq(var.tape, self) {
            return Err(TensorError::invalid("variable belongs to another tape"));
        }
        let inner = self.inner.borrow();
        if var.generation != inner.generation || var.id >= inner.nodes.len() {
            return Err(TensorError::StaleVar);
        }
        Ok(())
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var<'_, T>> {
        value.check_finite(name)?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        // Constant subgraphs need no backward bookkeeping.
        let op = if requires_grad { op } else { Op::Leaf };
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id,
            generation: inner.generation,
        })
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes[id].value)
    }
}

fn grad_buf<T: Element>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn propagate<T: Element>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: &[T]) {
    let val = |i: usize| nodes[i].value.data();
    let rg = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -T::one() } else { T::one() };
            if rg(*a) {
                let ga = grad_buf(grads, *a, g.len());
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x = *x + y;
                }
            }
            if rg(*b) {
                let nb = val(*b).len();
                let gb = grad_buf(grads, *b, nb);
                match bc {
                    None => {
                        for (x, &y) in gb.iter_mut().zip(g) {
                            *x = *x + sign * y;
                        }
                    }
                    Some(bc) => bc.for_each_block(|o, bi| {
                        for (x, &y) in gb[bi].iter_mut().zip(&g[o]) {
                            *x = *x + sign * y;
                        }
                    }),
                }
            }
        }
        Op::Mul(a, b, bc) => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let mut ga = std::mem::take(grad_buf(grads, *a, g.len()));
                match bc {
                    None => {
                        for ((x, &y), &bb) in ga.iter_mut().zip(g).zip(bv) {
                            *x = *x + y * bb;
                        }
                    }
                    Some(bc) => bc.for_each_block(|o, bi| {
                        for ((x, &y), &bb) in ga[o.clone()].iter_mut().zip(&g[o]).zip(&bv[bi]) {
                            *x = *x + y * bb;
                        }
                    }),
                }
                grads[*a] = Some(ga);
            }
            if rg(*b) {
                let mut gb = std::mem::take(grad_buf(grads, *b, bv.len()));
                match bc {
                    None => {
                        for ((x, &y), &aa) in gb.iter_mut().zip(g).zip(av) {
                            *x = *x + y * aa;
                        }
                    }
                    Some(bc) => bc.for_each_block(|o, bi| {
                        for ((x, &y), &aa) in gb[bi].iter_mut().zip(&g[o.clone()]).zip(&av[o]) {
                            *x = *x + y * aa;
                        }
                    }),
                }
                grads[*b] = Some(gb);
            }
        }
        Op::Scale(a, k) => {
            if rg(*a) {
                let ga = grad_buf(grads, *a, g.len());
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x = *x + y * *k;
                }
            }
        }
        Op::Offset(a) | Op::Reshape(a) => {
            if rg(*a) {
                let ga = grad_buf(grads, *a, g.len());
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x = *x + y;
                }
            }
        }
        Op::Unary(a, kind) => {
            if rg(*a) {
                let xv = val(*a);
                let yv = nodes[id].value.data();
                let ga = grad_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    let d = unary_grad(*kind, xv[i], yv[i]);
                    ga[i] = ga[i] + g[i] * d;
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            if rg(*a) {
                let xv = val(*a);
                let ga = grad_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        ga[i] = ga[i] + g[i];
                    }
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let ni = n as isize;
            let ki = k as isize;
            if rg(*a) {
                let mut ga = std::mem::take(grad_buf(grads, *a, m * k));
                // dA = G · Bᵀ
                T::gemm(m, n, k, g, (ni, 1), val(*b), (1, ni), T::one(), &mut ga);
                grads[*a] = Some(ga);
            }
            if rg(*b) {
                let mut gb = std::mem::take(grad_buf(grads, *b, k * n));
                // dB = Aᵀ · G
                T::gemm(k, m, n, val(*a), (1, ki), g, (ni, 1), T::one(), &mut gb);
                grads[*b] = Some(gb);
            }
        }
        Op::Bmm { a, b, g: groups, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (ni, ki) = (n as isize, k as isize);
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let mut ga = std::mem::take(grad_buf(grads, *a, groups * m * k));
                for p in 0..*groups {
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[p * m * n..(p + 1) * m * n],
                        (ni, 1),
                        &bv[p * k * n..(p + 1) * k * n],
                        (1, ni),
                        T::one(),
                        &mut ga[p * m * k..(p + 1) * m * k],
                    );
                }
                grads[*a] = Some(ga);
            }
            if rg(*b) {
                let mut gb = std::mem::take(grad_buf(grads, *b, groups * k * n));
                for p in 0..*groups {
                    T::gemm(
                        k,
                        m,
                        n,
                        &av[p * m * k..(p + 1) * m * k],
                        (1, ki),
                        &g[p * m * n..(p + 1) * m * n],
                        (ni, 1),
                        T::one(),
                        &mut gb[p * k * n..(p + 1) * k * n],
                    );
                }
                grads[*b] = Some(gb);
            }
        }
        Op::Permute(a, perm) => {
            if rg(*a) {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, back) = permute_data(g, nodes[id].value.shape(), &inv);
                let ga = grad_buf(grads, *a, back.len());
                for (x, y) in ga.iter_mut().zip(back) {
                    *x = *x + y;
                }
            }
        }
        Op::Narrow { a, axis, start } => {
            if rg(*a) {
                let src_shape = nodes[*a].value.shape();
                let (outer, full, inner) = split_axis(src_shape, *axis);
                let len = nodes[id].value.shape()[*axis];
                let ga = grad_buf(grads, *a, outer * full * inner);
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        ga[dst + i] = ga[dst + i] + g[src + i];
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = nodes[id].value.shape();
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut at = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                if rg(p) {
                    let gp = grad_buf(grads, p, outer * len * inner);
                    for o in 0..outer {
                        let src = o * total * inner + at * inner;
                        let dst = o * len * inner;
                        for i in 0..len * inner {
                            gp[dst + i] = gp[dst + i] + g[src + i];
                        }
                    }
                }
                at += len;
            }
        }
        Op::Softmax(a) => {
            if rg(*a) {
                let y = nodes[id].value.data();
                let d = *nodes[id].value.shape().last().unwrap();
                let ga = grad_buf(grads, *a, g.len());
                for r in 0..g.len() / d {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for i in 0..d {
                        ga[r * d + i] = ga[r * d + i] + yr[i] * (gr[i] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            if rg(*a) {
                let y = nodes[id].value.data();
                let d = *nodes[id].value.shape().last().unwrap();
                let ga = grad_buf(grads, *a, g.len());
                for r in 0..g.len() / d {
                    let gr = &g[r * d..(r + 1) * d];
                    let total: T = gr.iter().copied().sum();
                    for i in 0..d {
                        let p = y[r * d + i].exp();
                        ga[r * d + i] = ga[r * d + i] + gr[i] - p * total;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = *nodes[id].value.shape().last().unwrap();
            let rows = g.len() / d;
            let gam = gamma.map(|gi| val(gi));
            if let Some(gi) = gamma {
                if rg(*gi) {
                    let gg = grad_buf(grads, *gi, d);
                    for r in 0..rows {
                        for i in 0..d {
                            gg[i] = gg[i] + g[r * d + i] * xhat[r * d + i];
                        }
                    }
                }
            }
            if let Some(bi) = beta {
                if rg(*bi) {
                    let gb = grad_buf(grads, *bi, d);
                    for r in 0..rows {
                        for i in 0..d {
                            gb[i] = gb[i] + g[r * d + i];
                        }
                    }
                }
            }
            if rg(*x) {
                let gx = grad_buf(grads, *x, g.len());
                let inv_d = T::one() / T::from_f64(d as f64);
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    for i in 0..d {
                        let s = gam.map_or(T::one(), |gv| gv[i]);
                        dxhat[i] = g[r * d + i] * s;
                    }
                    let xh = &xhat[r * d..(r + 1) * d];
                    let m1: T = dxhat.iter().copied().sum::<T>() * inv_d;
                    let m2: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for i in 0..d {
                        gx[r * d + i] = gx[r * d + i] + rstd[r] * (dxhat[i] - m1 - xh[i] * m2);
                    }
                }
            }
        }
        Op::Sum(a) | Op::Mean(a) => {
            if rg(*a) {
                let n = val(*a).len();
                let scale = if matches!(nodes[id].op, Op::Mean(_)) {
                    T::one() / T::from_f64(n as f64)
                } else {
                    T::one()
                };
                let ga = grad_buf(grads, *a, n);
                for x in ga.iter_mut() {
                    *x = *x + g[0] * scale;
                }
            }
        }
        Op::Max(a, arg) => {
            if rg(*a) {
                let n = val(*a).len();
                let ga = grad_buf(grads, *a, n);
                ga[*arg] = ga[*arg] + g[0];
            }
        }
        Op::SumAxis { a, axis } => {
            if rg(*a) {
                let (outer, len, inner) = split_axis(nodes[*a].value.shape(), *axis);
                let ga = grad_buf(grads, *a, outer * len * inner);
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            let dst = (o * len + l) * inner + i;
                            ga[dst] = ga[dst] + g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Gather(a, idx) => {
            if rg(*a) {
                let n = val(*a).len();
                let ga = grad_buf(grads, *a, n);
                for (o, &i) in idx.iter().enumerate() {
                    ga[i] = ga[i] + g[o];
                }
            }
        }
        Op::Embedding { table, ids } => {
            if rg(*table) {
                let shape = nodes[*table].value.shape();
                let cols = shape[1];
                let gt = grad_buf(grads, *table, shape[0] * cols);
                for (r, &row) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[row * cols + c] = gt[row * cols + c] + g[r * cols + c];
                    }
                }
            }
        }
        Op::ReplaceRows { a, keep } => {
            if rg(*a) {
                let row = g.len() / keep.len();
                let ga = grad_buf(grads, *a, g.len());
                for (r, &k) in keep.iter().enumerate() {
                    if k {
                        for i in r * row..(r + 1) * row {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; only absolute accuracy matters inside GELU and
/// this is several times faster than the libm routine.
fn tanh_via_exp<T: Element>(u: T) -> T {
    let two = T::from_f64(2.0);
    T::one() - two / ((u + u).exp() + T::one())
}

fn unary_fwd<T: Element>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Gelu => {
            let c = T::from_f64(GELU_C);
            let a = T::from_f64(GELU_A);
            let half = T::from_f64(0.5);
            half * x * (T::one() + tanh_via_exp(c * (x + a * x * x * x)))
        }
        Unary::Silu => x / (T::one() + (-x).exp()),
        Unary::Exp => x.exp(),
        Unary::Sqrt => x.sqrt(),
        Unary::Relu => x.max(T::zero()),
        Unary::Neg => -x,
    }
}

fn unary_grad<T: Element>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Gelu => {
            let c = T::from_f64(GELU_C);
            let a = T::from_f64(GELU_A);
            let half = T::from_f64(0.5);
            let three = T::from_f64(3.0);
            let th = tanh_via_exp(c * (x + a * x * x * x));
            half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x)
        }
        Unary::Silu => {
            let s = T::one() / (T::one() + (-x).exp());
            s * (T::one() + x * (T::one() - s))
        }
        Unary::Exp => y,
        Unary::Sqrt => T::from_f64(0.5) / y,
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Neg => -T::one(),
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_ref(self.id).clone()
    }

    pub fn item(&self) -> Result<T> {
        self.tape.value_ref(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Result<Var<'t, T>> {
        self.tape.check(*self)?;
        let v = self.value();
        self.tape.constant(v)
    }

    fn unary_op(self, kind: Unary, name: &'static str) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.value.map(|x| unary_fwd(kind, x)), n.requires_grad)
        };
        self.tape.push(value, Op::Unary(self.id, kind), rg, name)
    }

    pub fn gelu(self) -> Result<Var<'t, T>> {
        self.unary_op(Unary::Gelu, "gelu")
    }
    pub fn silu(self) -> Result<Var<'t, T>> {
        self.unary_op(Unary::Silu, "silu")
    }
    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary_op(Unary::Exp, "exp")
    }
    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.unary_op(Unary::Sqrt, "sqrt")
    }
    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary_op(Unary::Relu, "relu")
    }
    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary_op(Unary::Neg, "neg")
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.mul(self)
    }

    fn binary(self, other: Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        let (value, bc, rg) = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            let rg = a.requires_grad || b.requires_grad;
            if a.value.shape() == b.value.shape() {
                (a.value.zip_with(&b.value, f)?, None, rg)
            } else {
                let bc = Bcast::plan(a.value.shape(), b.value.shape()).ok_or_else(|| {
                    TensorError::ShapeMismatch {
                        op: name,
                        lhs: a.value.shape().to_vec(),
                        rhs: b.value.shape().to_vec(),
                    }
                })?;
                let (av, bv) = (a.value.data(), b.value.data());
                let mut out = vec![T::zero(); av.len()];
                bc.for_each_block(|o, bi| {
                    for ((x, &p), &q) in out[o.clone()].iter_mut().zip(&av[o]).zip(&bv[bi]) {
                        *x = f(p, q);
                    }
                });
                (Tensor::new(a.value.shape().to_vec(), out)?, Some(bc), rg)
            }
        };
        let op = match name {
            "add" => Op::Add(self.id, other.id, bc),
            "sub" => Op::Sub(self.id, other.id, bc),
            _ => Op::Mul(self.id, other.id, bc),
        };
        self.tape.push(value, op, rg, name)
    }

    /// Element-wise sum; `other` may broadcast along leading or unit dims.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |a, b| a * b)
    }

    pub fn scale(self, k: T) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let (value, rg) = self.map_value(|x| x * k);
        self.tape.push(value, Op::Scale(self.id, k), rg, "scale")
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let (value, rg) = self.map_value(|x| x + c);
        self.tape.push(value, Op::Offset(self.id), rg, "add_scalar")
    }

    pub fn clamp(self, lo: T, hi: T) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        if lo > hi {
            return Err(TensorError::invalid("clamp: lo > hi"));
        }
        let (value, rg) = self.map_value(|x| x.max(lo).min(hi));
        self.tape.push(value, Op::Clamp(self.id, lo, hi), rg, "clamp")
    }

    fn map_value(&self, f: impl Fn(T) -> T) -> (Tensor<T>, bool) {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        (n.value.map(f), n.requires_grad)
    }

    /// `[..., k] × [k, n] → [..., n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        let (value, dims, rg) = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            let mismatch = || TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            };
            if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
                return Err(mismatch());
            }
            let k = sb[0];
            let n = sb[1];
            let m = a.value.numel() / k;
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, a.value.data(), (k as isize, 1), b.value.data(), (n as isize, 1), T::zero(), &mut out);
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = n;
            (Tensor::new(shape, out)?, (m, k, n), a.requires_grad || b.requires_grad)
        };
        let (m, k, n) = dims;
        self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
            "matmul",
        )
    }

    /// Batched product `[..., m, k] × [..., k, n] → [..., m, n]` with equal batch dims.
    pub fn bmm(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        let (value, dims, rg) = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            let r = sa.len();
            if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
                return Err(TensorError::ShapeMismatch {
                    op: "bmm",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
            let groups: usize = sa[..r - 2].iter().product();
            let mut out = vec![T::zero(); groups * m * n];
            let (av, bv) = (a.value.data(), b.value.data());
            for p in 0..groups {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[p * m * k..(p + 1) * m * k],
                    (k as isize, 1),
                    &bv[p * k * n..(p + 1) * k * n],
                    (n as isize, 1),
                    T::zero(),
                    &mut out[p * m * n..(p + 1) * m * n],
                );
            }
            let mut shape = sa.to_vec();
            shape[r - 1] = n;
            (Tensor::new(shape, out)?, (groups, m, k, n), a.requires_grad || b.requires_grad)
        };
        let (g, m, k, n) = dims;
        self.tape.push(
            value,
            Op::Bmm {
                a: self.id,
                b: other.id,
                g,
                m,
                k,
                n,
            },
            rg,
            "bmm",
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let shape = shape.into();
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.value.clone().reshape(shape)?, n.requires_grad)
        };
        self.tape.push(value, Op::Reshape(self.id), rg, "reshape")
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let shape = n.value.shape();
            let mut seen = vec![false; shape.len()];
            if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
                return Err(TensorError::invalid(format!("bad permutation {perm:?} for shape {shape:?}")));
            }
            let (s, d) = permute_data(n.value.data(), shape, perm);
            (Tensor::new(s, d)?, n.requires_grad)
        };
        self.tape.push(value, Op::Permute(self.id, perm.to_vec()), rg, "permute")
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(TensorError::invalid("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    /// Sub-range `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let shape = n.value.shape();
            if axis >= shape.len() || start + len > shape[axis] {
                return Err(TensorError::invalid(format!(
                    "narrow {start}..{} on axis {axis} of {shape:?}",
                    start + len
                )));
            }
            let (outer, full, inner_len) = split_axis(shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner_len);
            for o in 0..outer {
                let base = o * full * inner_len + start * inner_len;
                data.extend_from_slice(&n.value.data()[base..base + len * inner_len]);
            }
            let mut s = shape.to_vec();
            s[axis] = len;
            (Tensor::new(s, data)?, n.requires_grad)
        };
        self.tape.push(
            value,
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
            rg,
            "narrow",
        )
    }

    /// Numerically stabilised softmax over the last axis.
    pub fn softmax_lastdim(self) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            n.value.check_finite("softmax")?;
            let d = last_dim(n.value.shape())?;
            let mut out = n.value.data().to_vec();
            for row in out.chunks_mut(d) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s = s + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            }
            (Tensor::new(n.value.shape().to_vec(), out)?, n.requires_grad)
        };
        self.tape.push(value, Op::Softmax(self.id), rg, "softmax")
    }

    pub fn log_softmax_lastdim(self) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let d = last_dim(n.value.shape())?;
            let mut out = n.value.data().to_vec();
            for row in out.chunks_mut(d) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
                for v in row.iter_mut() {
                    *v = *v - lse;
                }
            }
            (Tensor::new(n.value.shape().to_vec(), out)?, n.requires_grad)
        };
        self.tape.push(value, Op::LogSoftmax(self.id), rg, "log_softmax")
    }

    /// Normalises each row of the last axis; `gamma`/`beta` apply an affine map.
    pub fn layer_norm(self, gamma: Option<Var<'t, T>>, beta: Option<Var<'t, T>>, eps: T) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        if !(eps > T::zero()) {
            return Err(TensorError::invalid("layer_norm: eps must be > 0"));
        }
        for v in gamma.iter().chain(beta.iter()) {
            self.tape.check(*v)?;
        }
        let (value, xhat, rstd, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let shape = n.value.shape();
            let d = last_dim(shape)?;
            let affine = |v: Option<Var<'t, T>>| -> Result<Option<&[T]>> {
                match v {
                    None => Ok(None),
                    Some(v) => {
                        let t = &inner.nodes[v.id].value;
                        if t.shape() != [d] {
                            return Err(TensorError::ShapeMismatch {
                                op: "layer_norm",
                                lhs: shape.to_vec(),
                                rhs: t.shape().to_vec(),
                            });
                        }
                        Ok(Some(t.data()))
                    }
                }
            };
            let (gv, bv) = (affine(gamma)?, affine(beta)?);
            let rows = n.value.numel() / d;
            let inv_d = T::one() / T::from_f64(d as f64);
            let x = n.value.data();
            let mut xhat = vec![T::zero(); x.len()];
            let mut rstd = vec![T::zero(); rows];
            let mut out = vec![T::zero(); x.len()];
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for i in 0..d {
                    let h = (row[i] - mean) * rs;
                    xhat[r * d + i] = h;
                    let s = gv.map_or(T::one(), |g| g[i]);
                    let b = bv.map_or(T::zero(), |b| b[i]);
                    out[r * d + i] = h * s + b;
                }
            }
            let rg = n.requires_grad
                || gamma.is_some_and(|g| inner.nodes[g.id].requires_grad)
                || beta.is_some_and(|b| inner.nodes[b.id].requires_grad);
            (Tensor::new(shape.to_vec(), out)?, xhat, rstd, rg)
        };
        self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.map(|g| g.id),
                beta: beta.map(|b| b.id),
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let (v, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.value.sum(), n.requires_grad)
        };
        self.tape.push(Tensor::scalar(v), Op::Sum(self.id), rg, "sum")
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let (v, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if n.value.numel() == 0 {
                return Err(TensorError::invalid("mean of empty tensor"));
            }
            (n.value.mean(), n.requires_grad)
        };
        self.tape.push(Tensor::scalar(v), Op::Mean(self.id), rg, "mean")
    }

    /// Largest element; the gradient flows to the first maximiser.
    pub fn max(self) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let (v, arg, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let data = n.value.data();
            if data.is_empty() {
                return Err(TensorError::invalid("max of empty tensor"));
            }
            let mut arg = 0;
            for (i, &x) in data.iter().enumerate() {
                if x > data[arg] {
                    arg = i;
                }
            }
            (data[arg], arg, n.requires_grad)
        };
        self.tape.push(Tensor::scalar(v), Op::Max(self.id, arg), rg, "max")
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let shape = n.value.shape();
            if axis >= shape.len() {
                return Err(TensorError::invalid(format!("sum_axis {axis} of {shape:?}")));
            }
            let (outer, len, inner_len) = split_axis(shape, axis);
            let x = n.value.data();
            let mut out = vec![T::zero(); outer * inner_len];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner_len {
                        out[o * inner_len + i] = out[o * inner_len + i] + x[(o * len + l) * inner_len + i];
                    }
                }
            }
            let mut s = shape.to_vec();
            s.remove(axis);
            if s.is_empty() {
                s.push(1);
            }
            (Tensor::new(s, out)?, n.requires_grad)
        };
        self.tape.push(value, Op::SumAxis { a: self.id, axis }, rg, "sum_axis")
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| TensorError::invalid(format!("mean_axis {axis} out of range")))?;
        self.sum_axis(axis)?.scale(T::one() / T::from_f64(len as f64))
    }

    /// Flat elements at `indices`, as a 1-d tensor.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let x = n.value.data();
            if indices.is_empty() {
                return Err(TensorError::invalid("gather with no indices"));
            }
            let mut out = Vec::with_capacity(indices.len());
            for &i in indices {
                out.push(*x.get(i).ok_or_else(|| TensorError::invalid(format!("gather index {i} out of range")))?);
            }
            (Tensor::new(vec![indices.len()], out)?, n.requires_grad)
        };
        self.tape.push(value, Op::Gather(self.id, indices.to_vec()), rg, "gather")
    }

    /// Treats the tensor as `keep.len()` rows; rows with `keep[r] == false`
    /// are overwritten by the matching rows of `replacement`, which acts as a
    /// constant. Kept rows are copied bit-for-bit.
    pub fn replace_rows(self, keep: &[bool], replacement: &Tensor<T>) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if replacement.shape() != n.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "replace_rows",
                    lhs: n.value.shape().to_vec(),
                    rhs: replacement.shape().to_vec(),
                });
            }
            if keep.is_empty() || n.value.numel() % keep.len() != 0 {
                return Err(TensorError::invalid("replace_rows: row count does not divide tensor"));
            }
            let row = n.value.numel() / keep.len();
            let mut out = n.value.data().to_vec();
            for (r, &k) in keep.iter().enumerate() {
                if !k {
                    out[r * row..(r + 1) * row].copy_from_slice(&replacement.data()[r * row..(r + 1) * row]);
                }
            }
            (Tensor::new(n.value.shape().to_vec(), out)?, n.requires_grad)
        };
        self.tape.push(
            value,
            Op::ReplaceRows {
                a: self.id,
                keep: keep.to_vec(),
            },
            rg,
            "replace_rows",
        )
    }
}

fn last_dim(shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(TensorError::invalid(format!("last dim must be >= 1, shape {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_values() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(t(&[2], &[1., 2.])).unwrap();
        let b = tape.constant(t(&[2], &[3., 4.])).unwrap();
        assert_eq!(a.add(b).unwrap().value().data(), &[4., 6.]);
    }

    #[test]
    fn mul_by_zeros_gives_zero_grad() {
        let tape = Tape::<f32>::new();
        let x = tape.param(t(&[3], &[1., -2., 3.])).unwrap();
        let z = tape.constant(Tensor::zeros(vec![3])).unwrap();
        let y = x.mul(z).unwrap();
        assert_eq!(y.value().data(), &[0., 0., 0.]);
        tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0., 0., 0.]);
    }

    #[test]
    fn matmul_values() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let b = tape.constant(t(&[2, 1], &[5., 6.])).unwrap();
        assert_eq!(a.matmul(b).unwrap().value().data(), &[17., 39.]);
        let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let m = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        assert_eq!(eye.matmul(m).unwrap().value(), m.value());
    }

    #[test]
    fn matmul_dim_mismatch() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(matches!(a.matmul(b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_uniform_and_single() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![4])).unwrap();
        assert_eq!(a.softmax_lastdim().unwrap().value().data(), &[0.25; 4]);
        let s = tape.constant(t(&[1], &[123.5])).unwrap();
        assert_eq!(s.softmax_lastdim().unwrap().value().data(), &[1.0]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let tape = Tape::<f32>::new();
        // constants are checked on entry too
        assert!(tape.constant(t(&[2], &[f32::NAN, 0.])).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![2, 5], 3.0)).unwrap();
        let g = tape.constant(Tensor::ones(vec![5])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![5])).unwrap();
        let y = x.layer_norm(Some(g), Some(b), 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        assert!(x.layer_norm(None, None, 0.0).is_err());
    }

    #[test]
    fn sum_of_squares_grad() {
        let tape = Tape::<f32>::new();
        let x = tape.param(t(&[3], &[1., 2., -4.])).unwrap();
        let y = x.square().unwrap().sum().unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2., 4., -8.]);
    }

    #[test]
    fn detached_gets_no_grad() {
        let tape = Tape::<f32>::new();
        let x = tape.param(t(&[2], &[1., 2.])).unwrap();
        let d = x.detach().unwrap();
        let y = x.add(d).unwrap().sum().unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1., 1.]);
        assert!(d.grad().is_none());
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::<f32>::new();
        let x = tape.param(t(&[2], &[1., 2.])).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarRoot(_))));
        let s = x.sum().unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::TapeConsumed)));
        tape.reset();
        assert!(matches!(s.sum(), Err(TensorError::StaleVar)));
        let x = tape.param(t(&[2], &[1., 2.])).unwrap();
        tape.backward(x.sum().unwrap()).unwrap();
    }

    #[test]
    fn broadcast_middle_unit_dim() {
        let tape = Tape::<f32>::new();
        let x = tape.param(Tensor::from_fn(vec![2, 3, 2], |i| i as f32)).unwrap();
        let s = tape.param(t(&[2, 1, 2], &[1., 10., 100., 1000.])).unwrap();
        let y = x.mul(s).unwrap();
        assert_eq!(
            y.value().data(),
            &[0., 10., 2., 30., 4., 50., 600., 7000., 800., 9000., 1000., 11000.]
        );
        tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(s.grad().unwrap().data(), &[6., 9., 24., 27.]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::<f32>::zeros(vec![2, 3])).unwrap();
        let y = tape.constant(Tensor::<f32>::zeros(vec![2])).unwrap();
        assert!(matches!(x.add(y), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn permute_and_narrow() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 3], |i| i as f32)).unwrap();
        let p = x.transpose().unwrap();
        assert_eq!(p.shape(), vec![3, 2]);
        assert_eq!(p.value().data(), &[0., 3., 1., 4., 2., 5.]);
        let n = x.narrow(1, 1, 2).unwrap();
        assert_eq!(n.value().data(), &[1., 2., 4., 5.]);
        let c = tape.concat(&[n, x], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 5]);
        assert_eq!(c.value().data(), &[1., 2., 0., 1., 2., 4., 5., 3., 4., 5.]);
    }

    #[test]
    fn replace_rows_is_exact() {
        let tape = Tape::<f32>::new();
        let x = tape.param(t(&[3, 2], &[1., 2., -0.0, 4., 5., 6.])).unwrap();
        let rep = t(&[3, 2], &[9., 9., 8., 8., 7., 7.]);
        let y = x.replace_rows(&[true, true, false], &rep).unwrap();
        assert!(y.value().bit_eq(&t(&[3, 2], &[1., 2., -0.0, 4., 7., 7.])));
        tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1., 1., 1., 1., 0., 0.]);
    }

    #[test]
    fn max_routes_to_first_argmax() {
        let tape = Tape::<f32>::new();
        let x = tape.param(t(&[4], &[1., 5., 5., 2.])).unwrap();
        let m = x.max().unwrap();
        assert_eq!(m.item().unwrap(), 5.0);
        tape.backward(m).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0., 1., 0., 0.]);
    }
}
