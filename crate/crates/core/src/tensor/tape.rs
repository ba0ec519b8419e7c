use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::array::{
    axis_split, broadcast_shape, for_each_pair, gemm, layout, order_free_sums, Tensor,
};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Variance floor of [`Var::feature_norm`].
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Reshape(usize),
    Transpose(usize),
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
    },
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softmax {
        a: usize,
        axis: usize,
    },
    LogSumExp {
        a: usize,
        axis: usize,
    },
    Sum {
        a: usize,
        axis: usize,
    },
    SumAll(usize),
    MaxPool {
        a: usize,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Gather {
        a: usize,
        index: Vec<usize>,
    },
    FeatureNorm {
        x: usize,
        scale: usize,
        shift: usize,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for reverse-mode differentiation.
///
/// Every operation on a [`Var`] appends a node; [`Tape::backward`] walks the
/// nodes in reverse. A tape is single-threaded; use one per scene pair.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradients of every parameter bound on the tape, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> {
        self.bound
            .iter()
            .map(move |&(pid, node)| (pid, self.grads[node].as_ref()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter as a differentiable leaf; repeated calls reuse the node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let v = self.var(store.get(id).value.clone());
        self.bound.borrow_mut().insert(id, v.id);
        v
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        let mut bound: Vec<(ParamId, usize)> =
            self.bound.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        bound.sort_by_key(|&(_, n)| n);
        Ok(Gradients { grads, bound })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let need = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (va, vb) = (val(a), val(b));
            let batched = va.rank() == 3;
            let (batch, m, n) = if batched {
                (out.shape()[0], out.shape()[1], out.shape()[2])
            } else {
                (1, out.shape()[0], out.shape()[1])
            };
            let k = if ta { va.shape()[va.rank() - 2] } else { va.shape()[va.rank() - 1] };
            let (sa, sb, sc) = (m * k, k * n, m * n);
            if need(a) {
                accumulate(grads, a, va.len(), |ga| {
                    for bi in 0..batch {
                        let gc = &g[bi * sc..(bi + 1) * sc];
                        let bb = &vb.data()[bi * sb..(bi + 1) * sb];
                        let ga = &mut ga[bi * sa..(bi + 1) * sa];
                        if ta {
                            gemm(k, n, m, bb, tb, gc, true, ga, true);
                        } else {
                            gemm(m, n, k, gc, false, bb, !tb, ga, true);
                        }
                    }
                });
            }
            if need(b) {
                accumulate(grads, b, vb.len(), |gb| {
                    for bi in 0..batch {
                        let gc = &g[bi * sc..(bi + 1) * sc];
                        let aa = &va.data()[bi * sa..(bi + 1) * sa];
                        let gb = &mut gb[bi * sb..(bi + 1) * sb];
                        if tb {
                            gemm(n, m, k, gc, true, aa, ta, gb, true);
                        } else {
                            gemm(k, m, n, aa, !ta, gc, false, gb, true);
                        }
                    }
                });
            }
        }
        &Op::Reshape(a) => {
            if need(a) {
                accumulate(grads, a, g.len(), |ga| add_into(ga, g));
            }
        }
        &Op::Transpose(a) => {
            if need(a) {
                let s = out.shape();
                let (batch, r, c) = last_two(s);
                accumulate(grads, a, g.len(), |ga| {
                    for bi in 0..batch {
                        let off = bi * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                ga[off + j * r + i] += g[off + i * c + j];
                            }
                        }
                    }
                });
            }
        }
        &Op::Binary { kind, a, b } => {
            let (va, vb) = (val(a), val(b));
            let lay = layout(va.shape(), vb.shape(), out.shape());
            if need(a) {
                accumulate(grads, a, va.len(), |ga| {
                    let bd = vb.data();
                    match kind {
                        BinKind::Add | BinKind::Sub => {
                            for_each_pair(&lay, g.len(), |o, ia, _| ga[ia] += g[o])
                        }
                        BinKind::Mul => {
                            for_each_pair(&lay, g.len(), |o, ia, ib| ga[ia] += g[o] * bd[ib])
                        }
                        BinKind::Div => {
                            for_each_pair(&lay, g.len(), |o, ia, ib| ga[ia] += g[o] / bd[ib])
                        }
                    }
                });
            }
            if need(b) {
                accumulate(grads, b, vb.len(), |gb| {
                    let (ad, bd) = (va.data(), vb.data());
                    match kind {
                        BinKind::Add => for_each_pair(&lay, g.len(), |o, _, ib| gb[ib] += g[o]),
                        BinKind::Sub => for_each_pair(&lay, g.len(), |o, _, ib| gb[ib] -= g[o]),
                        BinKind::Mul => {
                            for_each_pair(&lay, g.len(), |o, ia, ib| gb[ib] += g[o] * ad[ia])
                        }
                        BinKind::Div => for_each_pair(&lay, g.len(), |o, ia, ib| {
                            gb[ib] -= g[o] * ad[ia] / (bd[ib] * bd[ib])
                        }),
                    }
                });
            }
        }
        &Op::Scale(a, c) => {
            if need(a) {
                accumulate(grads, a, g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi)
                });
            }
        }
        &Op::Relu(a) => {
            if need(a) {
                let x = val(a).data();
                accumulate(grads, a, g.len(), |ga| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
        }
        &Op::Exp(a) => {
            if need(a) {
                let y = out.data();
                accumulate(grads, a, g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                });
            }
        }
        &Op::Log(a) => {
            if need(a) {
                let x = val(a).data();
                accumulate(grads, a, g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                });
            }
        }
        &Op::Softmax { a, axis } => {
            if need(a) {
                let y = out.data();
                let (outer, n, inner) = axis_split(out.shape(), axis);
                accumulate(grads, a, g.len(), |ga| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| o * n * inner + i * inner + j;
                            let dot: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..n {
                                ga[at(i)] += y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                });
            }
        }
        &Op::LogSumExp { a, axis } => {
            if need(a) {
                let x = val(a);
                let lse = out.data();
                let (outer, n, inner) = axis_split(x.shape(), axis);
                accumulate(grads, a, x.len(), |ga| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let r = o * inner + j;
                            for i in 0..n {
                                let at = o * n * inner + i * inner + j;
                                ga[at] += g[r] * (x.data()[at] - lse[r]).exp();
                            }
                        }
                    }
                });
            }
        }
        &Op::Sum { a, axis } => {
            if need(a) {
                let x = val(a);
                let (outer, n, inner) = axis_split(x.shape(), axis);
                accumulate(grads, a, x.len(), |ga| {
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                ga[o * n * inner + i * inner + j] += g[o * inner + j];
                            }
                        }
                    }
                });
            }
        }
        &Op::SumAll(a) => {
            if need(a) {
                let len = val(a).len();
                accumulate(grads, a, len, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
        }
        Op::MaxPool { a, argmax } => {
            if need(*a) {
                accumulate(grads, *a, val(*a).len(), |ga| {
                    for (o, &src) in argmax.iter().enumerate() {
                        ga[src] += g[o];
                    }
                });
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &inp in inputs {
                let width = val(inp).shape()[*axis];
                if need(inp) {
                    accumulate(grads, inp, val(inp).len(), |gi| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * width * inner;
                            add_into(&mut gi[dst..dst + width * inner], &g[src..src + width * inner]);
                        }
                    });
                }
                offset += width;
            }
        }
        Op::Gather { a, index } => {
            if need(*a) {
                let x = val(*a);
                let row = x.len() / x.shape()[0].max(1);
                accumulate(grads, *a, x.len(), |ga| {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut ga[src * row..(src + 1) * row], &g[r * row..(r + 1) * row]);
                    }
                });
            }
        }
        Op::FeatureNorm {
            x,
            scale,
            shift,
            axis,
            xhat,
            inv_std,
        } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let gamma = val(*scale).data();
            if need(*scale) {
                accumulate(grads, *scale, inner, |gs| {
                    for (grow, hrow) in g.chunks_exact(inner).zip(xhat.chunks_exact(inner)) {
                        for j in 0..inner {
                            gs[j] += grow[j] * hrow[j];
                        }
                    }
                });
            }
            if need(*shift) {
                accumulate(grads, *shift, inner, |gb| {
                    for grow in g.chunks_exact(inner) {
                        add_into(gb, grow);
                    }
                });
            }
            if need(*x) {
                accumulate(grads, *x, g.len(), |gx| {
                    let nf = n as f64;
                    let mut s1 = vec![0.0; inner];
                    let mut s2 = vec![0.0; inner];
                    for o in 0..outer {
                        let span = o * n * inner..(o + 1) * n * inner;
                        let (gb, hb) = (&g[span.clone()], &xhat[span.clone()]);
                        s1.fill(0.0);
                        s2.fill(0.0);
                        for (grow, hrow) in gb.chunks_exact(inner).zip(hb.chunks_exact(inner)) {
                            for j in 0..inner {
                                let dxh = grow[j] * gamma[j];
                                s1[j] += dxh;
                                s2[j] += dxh * hrow[j];
                            }
                        }
                        let is = &inv_std[o * inner..(o + 1) * inner];
                        let rows = gx[span].chunks_exact_mut(inner);
                        for ((xrow, grow), hrow) in rows.zip(gb.chunks_exact(inner)).zip(hb.chunks_exact(inner)) {
                            for j in 0..inner {
                                let dxh = grow[j] * gamma[j];
                                xrow[j] += is[j] / nf * (nf * dxh - s1[j] - hrow[j] * s2[j]);
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn last_two(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => unreachable!("checked at construction"),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.needs_grad(self.id);
        self.tape.push(value, op, rg)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    /// Matrix product; rank 2 × rank 2 or batched rank 3 × rank 3.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` transposes the last two axes when flagged.
    pub fn matmul_t(&self, other: &Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let (batch, m, ka) = match (a.rank(), ta) {
            (2, false) => (1, a.shape()[0], a.shape()[1]),
            (2, true) => (1, a.shape()[1], a.shape()[0]),
            (3, false) => (a.shape()[0], a.shape()[1], a.shape()[2]),
            (3, true) => (a.shape()[0], a.shape()[2], a.shape()[1]),
            _ => return Err(mismatch()),
        };
        let (bbatch, kb, n) = match (b.rank(), tb) {
            (2, false) => (1, b.shape()[0], b.shape()[1]),
            (2, true) => (1, b.shape()[1], b.shape()[0]),
            (3, false) => (b.shape()[0], b.shape()[1], b.shape()[2]),
            (3, true) => (b.shape()[0], b.shape()[2], b.shape()[1]),
            _ => return Err(mismatch()),
        };
        if ka != kb || a.rank() != b.rank() || batch != bbatch {
            return Err(mismatch());
        }
        let mut c = vec![0.0; batch * m * n];
        let (sa, sb, sc) = (m * ka, ka * n, m * n);
        for bi in 0..batch {
            gemm(
                m,
                ka,
                n,
                &a.data()[bi * sa..(bi + 1) * sa],
                ta,
                &b.data()[bi * sb..(bi + 1) * sb],
                tb,
                &mut c[bi * sc..(bi + 1) * sc],
                false,
            );
        }
        let shape = if a.rank() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.tape.needs_grad(self.id) || self.tape.needs_grad(other.id);
        Ok(self.tape.push(
            Tensor::from_parts(shape, c),
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            rg,
        ))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 value.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 && a.rank() != 3 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (batch, r, c) = last_two(a.shape());
        let mut data = vec![0.0; a.len()];
        for bi in 0..batch {
            let off = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    data[off + j * r + i] = a.data()[off + i * c + j];
                }
            }
        }
        let mut shape = a.shape().to_vec();
        let k = shape.len();
        shape.swap(k - 1, k - 2);
        Ok(self.unary(Tensor::from_parts(shape, data), Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let t = (*a).clone().reshape(shape)?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    fn binary(&self, other: &Var<'t>, kind: BinKind, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape(), name)?;
        let n: usize = shape.iter().product();
        let lay = layout(a.shape(), b.shape(), &shape);
        let mut data = vec![0.0; n];
        let (ad, bd) = (a.data(), b.data());
        match kind {
            BinKind::Add => for_each_pair(&lay, n, |o, i, j| data[o] = ad[i] + bd[j]),
            BinKind::Sub => for_each_pair(&lay, n, |o, i, j| data[o] = ad[i] - bd[j]),
            BinKind::Mul => for_each_pair(&lay, n, |o, i, j| data[o] = ad[i] * bd[j]),
            BinKind::Div => for_each_pair(&lay, n, |o, i, j| data[o] = ad[i] / bd[j]),
        }
        let rg = self.tape.needs_grad(self.id) || self.tape.needs_grad(other.id);
        Ok(self.tape.push(
            Tensor::from_parts(shape, data),
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Div, "div")
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| c * x);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(&self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    /// Softmax along `axis`, shifted by the per-slice max.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_axis("softmax", a.shape(), axis)?;
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let x = a.data();
        let mut y = vec![0.0; a.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                let m = (0..n).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for i in 0..n {
                    let e = (x[at(i)] - m).exp();
                    y[at(i)] = e;
                    s += e;
                }
                for i in 0..n {
                    y[at(i)] /= s;
                }
            }
        }
        Ok(self.unary(
            Tensor::from_parts(a.shape().to_vec(), y),
            Op::Softmax { a: self.id, axis },
        ))
    }

    /// `log Σ exp` along `axis`; the reduced axis is kept with length 1.
    pub fn logsumexp(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_axis("logsumexp", a.shape(), axis)?;
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let x = a.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                let m = (0..n).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..n).map(|i| (x[at(i)] - m).exp()).sum();
                out[o * inner + j] = m + s.ln();
            }
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = 1;
        Ok(self.unary(
            Tensor::from_parts(shape, out),
            Op::LogSumExp { a: self.id, axis },
        ))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_axis("sum", a.shape(), axis)?;
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let x = a.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    out[o * inner + j] += x[o * n * inner + i * inner + j];
                }
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        Ok(self.unary(Tensor::from_parts(shape, out), Op::Sum { a: self.id, axis }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let n = self.value().shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / n.max(1) as f64))
    }

    /// Sum of every element as a rank-0 value.
    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Max along `axis`, removing it. Gradient flows to the first maximal entry.
    pub fn max_pool(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        check_axis("max_pool", a.shape(), axis)?;
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let x = a.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut best = o * n * inner + j;
                for i in 1..n {
                    let at = o * n * inner + i * inner + j;
                    if x[at] > x[best] {
                        best = at;
                    }
                }
                out[o * inner + j] = x[best];
                argmax[o * inner + j] = best;
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        Ok(self.unary(
            Tensor::from_parts(shape, out),
            Op::MaxPool {
                a: self.id,
                argmax,
            },
        ))
    }

    /// Rows of a rank ≥ 1 value selected (with repetition) by `index`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let rows = a.shape().first().copied().unwrap_or(0);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let row = a.len() / rows.max(1);
        let mut data = Vec::with_capacity(index.len() * row);
        for &i in index {
            data.extend_from_slice(&a.data()[i * row..(i + 1) * row]);
        }
        let mut shape = a.shape().to_vec();
        shape[0] = index.len();
        Ok(self.unary(
            Tensor::from_parts(shape, data),
            Op::Gather {
                a: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Standardizes every `(outer, feature)` slice along `axis`, then applies
    /// the learned per-feature `scale` and `shift` (shape = trailing dims).
    ///
    /// Slice statistics are accumulated in sorted order, so the result is
    /// bit-identical under any permutation along `axis`.
    pub fn feature_norm(&self, scale: &Var<'t>, shift: &Var<'t>, axis: usize) -> Result<Var<'t>> {
        self.same_tape(scale);
        self.same_tape(shift);
        let a = self.value();
        check_axis("feature_norm", a.shape(), axis)?;
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let (gamma, beta) = (scale.value(), shift.value());
        if gamma.len() != inner || beta.len() != inner {
            return Err(Error::ShapeMismatch {
                op: "feature_norm",
                lhs: a.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let x = a.data();
        let nf = n as f64;
        let mean: Vec<f64> = order_free_sums(x, outer, n, inner).iter().map(|s| s / nf).collect();
        let mut dev = vec![0.0; a.len()];
        for (o, block) in dev.chunks_exact_mut(n * inner).enumerate() {
            let src = &x[o * n * inner..(o + 1) * n * inner];
            let mu = &mean[o * inner..(o + 1) * inner];
            for (drow, xrow) in block.chunks_exact_mut(inner).zip(src.chunks_exact(inner)) {
                for ((d, v), m) in drow.iter_mut().zip(xrow).zip(mu) {
                    *d = (v - m) * (v - m);
                }
            }
        }
        let inv_std: Vec<f64> = order_free_sums(&dev, outer, n, inner)
            .iter()
            .map(|s| 1.0 / (s / nf + NORM_EPS).sqrt())
            .collect();
        let mut xhat = dev;
        let mut y = vec![0.0; a.len()];
        let (g, b) = (gamma.data(), beta.data());
        for o in 0..outer {
            let mu = &mean[o * inner..(o + 1) * inner];
            let is = &inv_std[o * inner..(o + 1) * inner];
            for i in 0..n {
                let r = (o * n + i) * inner;
                for j in 0..inner {
                    let h = (x[r + j] - mu[j]) * is[j];
                    xhat[r + j] = h;
                    y[r + j] = g[j] * h + b[j];
                }
            }
        }
        let rg = [self.id, scale.id, shift.id]
            .iter()
            .any(|&i| self.tape.needs_grad(i));
        Ok(self.tape.push(
            Tensor::from_parts(a.shape().to_vec(), y),
            Op::FeatureNorm {
                x: self.id,
                scale: scale.id,
                shift: shift.id,
                axis,
                xhat,
                inv_std,
            },
            rg,
        ))
    }
}

/// Concatenates values along `axis`; all other dims must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::validation("concat of nothing"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    check_axis("concat", &base, axis)?;
    for v in &values[1..] {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: base,
                rhs: s.to_vec(),
            });
        }
    }
    let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let (outer, _, inner) = axis_split(&base, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let w = v.shape()[axis] * inner;
            data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let rg = parts.iter().any(|p| tape.needs_grad(p.id));
    Ok(tape.push(
        Tensor::from_parts(shape, data),
        Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        rg,
    ))
}
