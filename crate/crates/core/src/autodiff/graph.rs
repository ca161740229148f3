use std::rc::Rc;

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Alias(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Rc<[usize]>,
        pad_id: usize,
        smoothing: T,
        probs: Vec<T>,
        count: usize,
    },
    Embedding {
        table: Var,
        ids: Rc<[usize]>,
    },
    SwapAxes {
        x: Var,
        a1: usize,
        a2: usize,
    },
    Reshape(Var),
    Concat {
        xs: Vec<Var>,
        outer: usize,
        inner: usize,
        sizes: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Append-only record of tensor operations supporting reverse-mode
/// differentiation.
///
/// A graph belongs to a single thread from construction through
/// [`Graph::backward`]. Node order is the forward append order and the
/// backward sweep visits nodes in exactly the reverse order.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    pub(crate) gates: Option<FrozenGates>,
}

/// ReLU on/off pattern replayed in place of the input signs, so a function
/// can be evaluated on one smooth piece beyond its kinks.
#[derive(Debug, Clone)]
pub(crate) struct FrozenGates {
    pub(crate) pattern: Vec<bool>,
    pub(crate) cursor: usize,
    pub(crate) mismatch: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            gates: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Sign pattern of every ReLU input, the only non-smooth points of the
    /// operator set.
    pub(crate) fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Drop every node appended after the graph had `len` nodes.
    ///
    /// Vars created after that point become invalid. Used by incremental
    /// decoders to discard per-step nodes while keeping bound parameters
    /// and encoder outputs.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf holding a copy of `value`.
    pub fn param(&mut self, value: &Tensor<T>) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Graph::backward) loss with respect to `v`.
    ///
    /// `None` when `v` does not require grad or received no contribution.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grad_data(v).map(|g| {
            Tensor::new(self.shape(v), g.to_vec()).expect("gradient buffers match node shapes")
        })
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when no gradient reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`, replacing any previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        if self.gates.is_some() {
            return Err(Error::contract("backward through a graph with frozen ReLU gates"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }
}

/// Gradient buffer of `v`, created zeroed on first use; `None` when `v` is not
/// differentiable.
fn acc<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    par::for_each_chunk_mut(dst, 4096, |ci, c| {
        let s = &src[ci * 4096..ci * 4096 + c.len()];
        for (d, &v) in c.iter_mut().zip(s) {
            *d = *d + v;
        }
    });
}

#[inline]
pub(crate) fn op_strides(trans: bool, rows: usize, cols: usize) -> (usize, usize) {
    // strides of op(X) where X is stored row-major; (rows, cols) are op(X)'s dims
    if trans {
        (1, rows)
    } else {
        (cols, 1)
    }
}

fn propagate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Alias(x) | Op::Reshape(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                add_into(gx, g);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(gv) = acc(nodes, grads, v) {
                    add_into(gv, g);
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let d = gb.len();
                for row in g.chunks(d) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, &gv), &o) in ga.iter_mut().zip(g).zip(bv) {
                    *d = *d + gv * o;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for ((d, &gv), &o) in gb.iter_mut().zip(g).zip(av) {
                    *d = *d + gv * o;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (d, &gv) in gx.iter_mut().zip(g) {
                    *d = *d + gv * *c;
                }
            }
        }
        Op::Relu(x) => {
            let y = node.value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((d, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                    if yv > T::zero() {
                        *d = *d + gv;
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((d, &gv), &mv) in gx.iter_mut().zip(g).zip(mask) {
                    *d = *d + gv * mv;
                }
            }
        }
        Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            k,
            n,
            shared_b,
        } => matmul_backward(
            nodes, grads, g, *a, *b, *ta, *tb, *batch, *m, *k, *n, *shared_b,
        ),
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = node.value.data();
            let (outer, len, inner) = (*outer, *len, *inner);
            if let Some(gx) = acc(nodes, grads, *x) {
                if inner == 1 {
                    softmax_rows_backward(y, g, gx, len);
                } else {
                    for o in 0..outer {
                        for p in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + p;
                            let dot = (0..len).fold(T::zero(), |s, j| s + g[idx(j)] * y[idx(j)]);
                            for j in 0..len {
                                let t = idx(j);
                                gx[t] = gx[t] + y[t] * (g[t] - dot);
                            }
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmax { x } => {
            let y = node.value.data();
            let len = *node.value.shape().last().expect("masked softmax input has rank 4");
            if let Some(gx) = acc(nodes, grads, *x) {
                softmax_rows_backward(y, g, gx, len);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gam = nodes[gain.0].value.data();
            let d = gam.len();
            if let Some(gx) = acc(nodes, grads, *x) {
                let inv_d = T::one() / T::from_usize(d).unwrap();
                par::for_each_chunk_mut(gx, d, |r, gxr| {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xh[j];
                    }
                    mean_dxh = mean_dxh * inv_d;
                    mean_dxh_xh = mean_dxh_xh * inv_d;
                    let rs = rstd[r];
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        gxr[j] = gxr[j] + rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                });
            }
            if let Some(gg) = acc(nodes, grads, *gain) {
                for (row, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] = gg[j] + row[j] * xh[j];
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *bias) {
                for row in g.chunks(d) {
                    for j in 0..d {
                        gb[j] = gb[j] + row[j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            pad_id,
            smoothing,
            probs,
            count,
        } => {
            if *count == 0 {
                return;
            }
            let v = *nodes[logits.0].value.shape().last().unwrap();
            let scale = g[0] / T::from_usize(*count).unwrap();
            let uniform = *smoothing / T::from_usize(v).unwrap();
            let hit = T::one() - *smoothing;
            if let Some(gl) = acc(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad_id {
                        continue;
                    }
                    let p = &probs[r * v..(r + 1) * v];
                    let gr = &mut gl[r * v..(r + 1) * v];
                    for j in 0..v {
                        let q = if j == t { hit + uniform } else { uniform };
                        gr[j] = gr[j] + (p[j] - q) * scale;
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(gt) = acc(nodes, grads, *table) {
                let d = *nodes[table.0].value.shape().last().unwrap();
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    let dst = &mut gt[id * d..(id + 1) * d];
                    for (a, &b) in dst.iter_mut().zip(src) {
                        *a = *a + b;
                    }
                }
            }
        }
        Op::SwapAxes { x, a1, a2 } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                // the gradient flows back through the inverse permutation,
                // which for a swap is the same swap applied to the output shape
                let swapped = swap_axes_data(g, node.value.shape(), *a1, *a2);
                add_into(gx, &swapped);
            }
        }
        Op::Concat {
            xs,
            outer,
            inner,
            sizes,
        } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (x, &sz) in xs.iter().zip(sizes) {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + sz) * inner];
                        let dst = &mut gx[o * sz * inner..(o + 1) * sz * inner];
                        for (a, &b) in dst.iter_mut().zip(src) {
                            *a = *a + b;
                        }
                    }
                }
                offset += sz;
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for d in gx.iter_mut() {
                    *d = *d + g[0];
                }
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let s = g[0] / T::from_usize(gx.len().max(1)).unwrap();
                for d in gx.iter_mut() {
                    *d = *d + s;
                }
            }
        }
    }
}

fn softmax_rows_backward<T: Scalar>(y: &[T], g: &[T], gx: &mut [T], len: usize) {
    par::for_each_chunk_mut(gx, len, |r, gxr| {
        let yr = &y[r * len..(r + 1) * len];
        let gr = &g[r * len..(r + 1) * len];
        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
        for j in 0..len {
            gxr[j] = gxr[j] + yr[j] * (gr[j] - dot);
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
) {
    let av = nodes[a.0].value.data();
    let bv = nodes[b.0].value.data();
    let sa = op_strides(ta, m, k);
    let sb = op_strides(tb, k, n);
    let sb_t = (sb.1, sb.0);
    let sa_t = (sa.1, sa.0);
    // dA stored like A: op(A) is m x k
    let da_store = if ta { (1, m) } else { (k, 1) };
    let db_store = if tb { (1, k) } else { (n, 1) };
    let one = T::one();

    if let Some(ga) = acc(nodes, grads, a) {
        if shared_b && !ta {
            T::gemm(batch * m, n, k, one, g, (n, 1), bv, sb_t, one, ga, da_store);
        } else {
            let b_stride = if shared_b { 0 } else { k * n };
            par::for_each_chunk_mut(ga, m * k, |bi, gab| {
                T::gemm(
                    m,
                    n,
                    k,
                    one,
                    &g[bi * m * n..(bi + 1) * m * n],
                    (n, 1),
                    &bv[bi * b_stride..bi * b_stride + k * n],
                    sb_t,
                    one,
                    gab,
                    da_store,
                );
            });
        }
    }
    if let Some(gb) = acc(nodes, grads, b) {
        if shared_b {
            if !ta {
                // op(A)^T over all batch rows at once: [k, batch*m]
                T::gemm(k, batch * m, n, one, av, (1, k), g, (n, 1), one, gb, db_store);
            } else {
                for bi in 0..batch {
                    T::gemm(
                        k,
                        m,
                        n,
                        one,
                        &av[bi * m * k..(bi + 1) * m * k],
                        sa_t,
                        &g[bi * m * n..(bi + 1) * m * n],
                        (n, 1),
                        one,
                        gb,
                        db_store,
                    );
                }
            }
        } else {
            par::for_each_chunk_mut(gb, k * n, |bi, gbb| {
                T::gemm(
                    k,
                    m,
                    n,
                    one,
                    &av[bi * m * k..(bi + 1) * m * k],
                    sa_t,
                    &g[bi * m * n..(bi + 1) * m * n],
                    (n, 1),
                    one,
                    gbb,
                    db_store,
                );
            });
        }
    }
}

/// Materialize `data` (with `shape`) with axes `a1` and `a2` exchanged.
pub(crate) fn swap_axes_data<T: Scalar>(data: &[T], shape: &[usize], a1: usize, a2: usize) -> Vec<T> {
    let (a1, a2) = (a1.min(a2), a1.max(a2));
    if a1 == a2 {
        return data.to_vec();
    }
    // view the tensor as [outer, s1, mid, s2, inner] and emit [outer, s2, mid, s1, inner]
    let outer: usize = shape[..a1].iter().product();
    let s1 = shape[a1];
    let mid: usize = shape[a1 + 1..a2].iter().product();
    let s2 = shape[a2];
    let inner: usize = shape[a2 + 1..].iter().product();
    let mut out = Vec::with_capacity(data.len());
    for o in 0..outer {
        for j in 0..s2 {
            for m in 0..mid {
                for i in 0..s1 {
                    let src = (((o * s1 + i) * mid + m) * s2 + j) * inner;
                    out.extend_from_slice(&data[src..src + inner]);
                }
            }
        }
    }
    out
}
