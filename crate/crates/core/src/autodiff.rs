//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar result walks the tape in reverse and
//! returns [`Gradients`] for every node that requires a gradient.
//!
//! ```
//! use regionblip::autodiff::Tape;
//! use regionblip::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
//! let y = x.mul(x).unwrap().sum_all();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! The tape is rebuilt for every training step; nothing is shared between
//! steps except parameter values.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    broadcast_offsets, broadcast_shape, broadcast_to, gemm, reduce_to, split_axis, strides, Tensor,
};

/// Fill value used by masked attention logits.
pub const MASK_FILL: f64 = -1e9;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Pow(usize, f64),
    Abs(usize),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    Clamp(usize, f64, f64),
    Sum { x: usize, axis: usize },
    Mean { x: usize, axis: usize },
    SumAll(usize),
    Max { x: usize, axis: usize, argmax: Vec<usize> },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat { xs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    BroadcastTo(usize),
    MaskedFill { x: usize, mask: Rc<Vec<bool>> },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    MatMul { a: usize, b: usize, trans_b: bool },
    Gather { table: usize, ids: Vec<usize> },
    Pick { x: usize, idx: Vec<usize> },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Tensor, rstd: Vec<f64> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// require a gradient or does not influence the root.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.by_id(v.id)
    }

    pub(crate) fn by_id(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
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

    /// A leaf that receives a gradient.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let rv = &nodes[root.id].value;
        if rv.numel() != 1 || !rv.shape().is_empty() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !nodes[root.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.id] = Some(Tensor::scalar(1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    let data = t.data();
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

/// Batched matmul kernel. `a` is `[batch.., m, k]`; `b` is either rank 2
/// (shared across the batch) or has the same batch dims as `a`.
fn matmul_values(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return shape_err(format!("matmul needs rank >= 2, got {:?} and {:?}", a.shape(), b.shape()));
    }
    let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (bk, n) = {
        let (r, c) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
        if trans_b { (c, r) } else { (r, c) }
    };
    if k != bk {
        return shape_err(format!(
            "matmul inner dimensions differ: {:?} x {:?}{}",
            a.shape(),
            b.shape(),
            if trans_b { "^T" } else { "" }
        ));
    }
    let batch_a = &a.shape()[..a.rank() - 2];
    let shared = b.rank() == 2;
    if !shared && &b.shape()[..b.rank() - 2] != batch_a {
        return shape_err(format!("matmul batch dims differ: {:?} x {:?}", a.shape(), b.shape()));
    }
    let nb: usize = batch_a.iter().product();
    let mut out = vec![0.0; nb * m * n];
    if shared && !trans_b {
        // Fold the batch into rows.
        gemm(a.data(), b.data(), &mut out, nb * m, k, n, false, false);
    } else if shared {
        gemm(a.data(), b.data(), &mut out, nb * m, k, n, false, true);
    } else {
        for i in 0..nb {
            gemm(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
                trans_b,
            );
        }
    }
    let mut shape = batch_a.to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if rg(*a) {
                accumulate(grads, nodes, *a, reduce_to(g, val(*a).shape()));
            }
            if rg(*b) {
                let gb = reduce_to(g, val(*b).shape());
                accumulate(grads, nodes, *b, if sign < 0.0 { gb.map(|v| -v) } else { gb });
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if rg(*a) {
                let bb = broadcast_to(vb, out.shape());
                accumulate(grads, nodes, *a, reduce_to(&zip_map(g, &bb, |x, y| x * y), va.shape()));
            }
            if rg(*b) {
                let ab = broadcast_to(va, out.shape());
                accumulate(grads, nodes, *b, reduce_to(&zip_map(g, &ab, |x, y| x * y), vb.shape()));
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let bb = broadcast_to(vb, out.shape());
            if rg(*a) {
                accumulate(grads, nodes, *a, reduce_to(&zip_map(g, &bb, |x, y| x / y), va.shape()));
            }
            if rg(*b) {
                // d(a/b)/db = -out/b
                let t = zip_map(&zip_map(g, out, |x, y| x * y), &bb, |x, y| -x / y);
                accumulate(grads, nodes, *b, reduce_to(&t, vb.shape()));
            }
        }
        Op::Scale(x, c) => accumulate(grads, nodes, *x, g.map(|v| v * c)),
        Op::AddScalar(x) => accumulate(grads, nodes, *x, g.clone()),
        Op::Exp(x) => accumulate(grads, nodes, *x, zip_map(g, out, |a, b| a * b)),
        Op::Log(x) => accumulate(grads, nodes, *x, zip_map(g, val(*x), |a, b| a / b)),
        Op::Pow(x, p) => {
            let p = *p;
            accumulate(grads, nodes, *x, zip_map(g, val(*x), |a, b| a * p * b.powf(p - 1.0)))
        }
        Op::Abs(x) => accumulate(grads, nodes, *x, zip_map(g, val(*x), |a, b| a * sign(b))),
        Op::Sigmoid(x) => accumulate(grads, nodes, *x, zip_map(g, out, |a, s| a * s * (1.0 - s))),
        Op::Tanh(x) => accumulate(grads, nodes, *x, zip_map(g, out, |a, t| a * (1.0 - t * t))),
        Op::Gelu(x) => accumulate(grads, nodes, *x, zip_map(g, val(*x), |a, b| a * gelu_grad(b))),
        Op::Clamp(x, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            accumulate(
                grads,
                nodes,
                *x,
                zip_map(g, val(*x), |a, b| if b >= lo && b <= hi { a } else { 0.0 }),
            )
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let xs = val(*x).shape();
            let (outer, n, inner) = split_axis(xs, *axis);
            let scale = if matches!(node.op, Op::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for a in 0..n {
                    for i in 0..inner {
                        gx[(o * n + a) * inner + i] = g.data()[o * inner + i] * scale;
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::from_parts(xs.to_vec(), gx));
        }
        Op::SumAll(x) => {
            let xs = val(*x).shape();
            accumulate(grads, nodes, *x, Tensor::full(xs.to_vec(), g.item()));
        }
        Op::Max { x, axis, argmax } => {
            let xs = val(*x).shape();
            let (_, n, inner) = split_axis(xs, *axis);
            let mut gx = vec![0.0; val(*x).numel()];
            for (j, &am) in argmax.iter().enumerate() {
                let (o, i) = (j / inner, j % inner);
                gx[(o * n + am) * inner + i] += g.data()[j];
            }
            accumulate(grads, nodes, *x, Tensor::from_parts(xs.to_vec(), gx));
        }
        Op::Reshape(x) => {
            let xs = val(*x).shape().to_vec();
            accumulate(grads, nodes, *x, Tensor::from_parts(xs, g.data().to_vec()));
        }
        Op::Permute(x, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            accumulate(grads, nodes, *x, permute_tensor(g, &inv));
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut start = 0;
            for &x in xs {
                let ext = val(x).shape()[*axis];
                if rg(x) {
                    let mut gx = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gx.extend_from_slice(&g.data()[base..base + ext * inner]);
                    }
                    accumulate(grads, nodes, x, Tensor::from_parts(val(x).shape().to_vec(), gx));
                }
                start += ext;
            }
        }
        Op::Slice { x, axis, start } => {
            let xs = val(*x).shape();
            let (outer, total, inner) = split_axis(xs, *axis);
            let ext = out.shape()[*axis];
            let mut gx = vec![0.0; outer * total * inner];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * ext * inner;
                gx[dst..dst + ext * inner].copy_from_slice(&g.data()[src..src + ext * inner]);
            }
            accumulate(grads, nodes, *x, Tensor::from_parts(xs.to_vec(), gx));
        }
        Op::BroadcastTo(x) => accumulate(grads, nodes, *x, reduce_to(g, val(*x).shape())),
        Op::MaskedFill { x, mask } => {
            let gx = g.data().iter().zip(mask.iter()).map(|(&v, &m)| if m { 0.0 } else { v }).collect();
            accumulate(grads, nodes, *x, Tensor::from_parts(g.shape().to_vec(), gx));
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let gd = g.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * n + a) * inner + i;
                    let s: f64 = (0..n).map(|a| gd[at(a)] * y[at(a)]).sum();
                    for a in 0..n {
                        gx[at(a)] = y[at(a)] * (gd[at(a)] - s);
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::from_parts(out.shape().to_vec(), gx));
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let gd = g.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * n + a) * inner + i;
                    let s: f64 = (0..n).map(|a| gd[at(a)]).sum();
                    for a in 0..n {
                        gx[at(a)] = gd[at(a)] - y[at(a)].exp() * s;
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::from_parts(out.shape().to_vec(), gx));
        }
        Op::MatMul { a, b, trans_b } => {
            let (va, vb) = (val(*a), val(*b));
            let ra = va.rank();
            let (m, k) = (va.shape()[ra - 2], va.shape()[ra - 1]);
            let n = out.shape()[out.rank() - 1];
            let nb: usize = va.shape()[..ra - 2].iter().product();
            let shared = vb.rank() == 2;
            if rg(*a) {
                // dA = dC · B^T   (or dC · B when B was transposed)
                let mut ga = vec![0.0; va.numel()];
                if shared {
                    gemm(g.data(), vb.data(), &mut ga, nb * m, n, k, false, !trans_b);
                } else {
                    for i in 0..nb {
                        gemm(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            !trans_b,
                        );
                    }
                }
                accumulate(grads, nodes, *a, Tensor::from_parts(va.shape().to_vec(), ga));
            }
            if rg(*b) {
                // dB = A^T · dC   (or dC^T · A when B was transposed)
                let mut gb = vec![0.0; vb.numel()];
                let (rows, blocks) = if shared { (nb * m, 1) } else { (m, nb) };
                for i in 0..blocks {
                    let ablk = &va.data()[i * rows * k..(i + 1) * rows * k];
                    let gblk = &g.data()[i * rows * n..(i + 1) * rows * n];
                    let dst = if shared { &mut gb[..] } else { &mut gb[i * k * n..(i + 1) * k * n] };
                    if *trans_b {
                        gemm(gblk, ablk, dst, n, rows, k, true, false);
                    } else {
                        gemm(ablk, gblk, dst, k, rows, n, true, false);
                    }
                }
                accumulate(grads, nodes, *b, Tensor::from_parts(vb.shape().to_vec(), gb));
            }
        }
        Op::Gather { table, ids } => {
            let ts = val(*table).shape();
            let d = ts[1];
            let mut gt = vec![0.0; val(*table).numel()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[id * d + j] += g.data()[r * d + j];
                }
            }
            accumulate(grads, nodes, *table, Tensor::from_parts(ts.to_vec(), gt));
        }
        Op::Pick { x, idx } => {
            let xs = val(*x).shape();
            let c = xs[xs.len() - 1];
            let mut gx = vec![0.0; val(*x).numel()];
            for (r, &i) in idx.iter().enumerate() {
                gx[r * c + i] += g.data()[r];
            }
            accumulate(grads, nodes, *x, Tensor::from_parts(xs.to_vec(), gx));
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = *out.shape().last().unwrap();
            let gain_v = val(*gain).data();
            let gd = g.data();
            let xh = xhat.data();
            if rg(*gain) {
                let mut gg = vec![0.0; d];
                for (r, row) in gd.chunks(d).enumerate() {
                    for j in 0..d {
                        gg[j] += row[j] * xh[r * d + j];
                    }
                }
                accumulate(grads, nodes, *gain, Tensor::from_parts(vec![d], gg));
            }
            if rg(*bias) {
                let mut gb = vec![0.0; d];
                for row in gd.chunks(d) {
                    for j in 0..d {
                        gb[j] += row[j];
                    }
                }
                accumulate(grads, nodes, *bias, Tensor::from_parts(vec![d], gb));
            }
            if rg(*x) {
                let mut gx = vec![0.0; gd.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = &gd[r * d..(r + 1) * d];
                    let xr = &xh[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dxh = row[j] * gain_v[j];
                        m1 += dxh;
                        m2 += dxh * xr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dxh = row[j] * gain_v[j];
                        gx[r * d + j] = rs * (dxh - m1 - xr[j] * m2);
                    }
                }
                accumulate(grads, nodes, *x, Tensor::from_parts(out.shape().to_vec(), gx));
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn binary_values(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(zip_map(a, b, f));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let n: usize = shape.iter().product();
    // Common case: `b` is a trailing block (e.g. a bias) of `a`.
    if shape == a.shape() && a.shape().ends_with(b.shape()) {
        let bn = b.numel();
        let bd = b.data();
        let data = a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % bn])).collect();
        return Ok(Tensor::from_parts(shape, data));
    }
    let oa = broadcast_offsets(a.shape(), &shape);
    let ob = broadcast_offsets(b.shape(), &shape);
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n).map(|i| f(ad[oa[i]], bd[ob[i]])).collect();
    Ok(Tensor::from_parts(shape, data))
}

impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.rg(self.id)
    }

    /// Scalar value of a one-element variable.
    pub fn item(self) -> f64 {
        self.value().item()
    }

    fn same_tape(self, other: Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables recorded on different tapes");
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(other);
        let v = binary_values(&self.value(), &other.value(), f)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, op, rg))
    }

    /// A gradient-free copy of this value.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, |a, b| a + b, Op::Add(self.id, o.id))
    }

    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, |a, b| a - b, Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, |a, b| a * b, Op::Mul(self.id, o.id))
    }

    pub fn div(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, |a, b| a / b, Op::Div(self.id, o.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn pow(self, p: f64) -> Var<'t> {
        let v = self.value().map(|x| x.powf(p));
        self.unary(v, Op::Pow(self.id, p))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.pow(0.5)
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through inside the
    /// interval and zero outside it.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    fn reduce_axis(self, axis: usize, keepdim: bool, mean: bool) -> Result<Var<'t>> {
        let x = self.value();
        x.axis_check(axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let d = x.data();
        let mut out = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let row = &d[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let op = if mean { Op::Mean { x: self.id, axis } } else { Op::Sum { x: self.id, axis } };
        let v = self.unary(Tensor::from_parts(reduced_shape(x.shape(), axis, true), out), op);
        if keepdim {
            Ok(v)
        } else {
            v.reshape(reduced_shape(x.shape(), axis, false))
        }
    }

    pub fn sum(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        self.reduce_axis(axis, keepdim, false)
    }

    pub fn mean(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        self.reduce_axis(axis, keepdim, true)
    }

    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum_all(self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Maximum along `axis`; ties resolve to the lowest index.
    pub fn max(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let x = self.value();
        x.axis_check(axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let d = x.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    let v = d[(o * n + a) * inner + i];
                    let j = o * inner + i;
                    if v > out[j] {
                        out[j] = v;
                        argmax[j] = a;
                    }
                }
            }
        }
        let v = self.unary(
            Tensor::from_parts(reduced_shape(x.shape(), axis, true), out),
            Op::Max { x: self.id, axis, argmax },
        );
        if keepdim {
            Ok(v)
        } else {
            v.reshape(reduced_shape(x.shape(), axis, false))
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let shape = shape.into();
        if shape.iter().product::<usize>() != x.numel() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", x.shape()));
        }
        let v = Tensor::new(shape, x.data().to_vec())?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("invalid permutation {perm:?} for rank {}", x.rank()));
        }
        let v = permute_tensor(&x, perm);
        Ok(self.unary(v, Op::Permute(self.id, perm.to_vec())))
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t>> {
        let r = self.value().rank();
        if a >= r || b >= r {
            return Err(Error::Axis { axis: a.max(b), rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn concat(xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tape = first.tape;
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|x| x.value()).collect();
        let base = vals[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Axis { axis, rank: base.len() });
        }
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i])
            {
                return shape_err(format!("concat shapes {base:?} and {s:?} differ off axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let ext = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|x| x.requires_grad());
        Ok(tape.push(
            Tensor::from_parts(shape, data),
            Op::Concat { xs: xs.iter().map(|x| x.id).collect(), axis },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        x.axis_check(axis)?;
        let (outer, total, inner) = split_axis(x.shape(), axis);
        if start >= end || end > total {
            return shape_err(format!("slice {start}..{end} out of range for extent {total}"));
        }
        let ext = end - start;
        let mut data = Vec::with_capacity(outer * ext * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            data.extend_from_slice(&x.data()[base..base + ext * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = ext;
        Ok(self.unary(Tensor::from_parts(shape, data), Op::Slice { x: self.id, axis, start }))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if broadcast_shape(x.shape(), shape)? != shape {
            return shape_err(format!("cannot broadcast {:?} to {shape:?}", x.shape()));
        }
        Ok(self.unary(broadcast_to(&x, shape), Op::BroadcastTo(self.id)))
    }

    /// Replaces elements where `mask` is true with `value`. `mask` is given
    /// with `mask_shape`, broadcastable to this variable's shape.
    pub fn masked_fill(self, mask: &[bool], mask_shape: &[usize], value: f64) -> Result<Var<'t>> {
        let x = self.value();
        if mask.len() != mask_shape.iter().product::<usize>() {
            return shape_err("mask buffer does not match its shape");
        }
        if broadcast_shape(mask_shape, x.shape())? != x.shape() {
            return shape_err(format!("mask {mask_shape:?} does not broadcast to {:?}", x.shape()));
        }
        let full: Vec<bool> = if mask_shape == x.shape() {
            mask.to_vec()
        } else {
            broadcast_offsets(mask_shape, x.shape()).iter().map(|&o| mask[o]).collect()
        };
        let data = x.data().iter().zip(&full).map(|(&v, &m)| if m { value } else { v }).collect();
        Ok(self.unary(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::MaskedFill { x: self.id, mask: Rc::new(full) },
        ))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        x.axis_check(axis)?;
        let v = softmax_values(&x, axis, false);
        Ok(self.unary(v, Op::Softmax { x: self.id, axis }))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        x.axis_check(axis)?;
        let v = softmax_values(&x, axis, true);
        Ok(self.unary(v, Op::LogSoftmax { x: self.id, axis }))
    }

    /// Batched matrix product; `o` is rank 2 (shared) or has this
    /// variable's batch dimensions.
    pub fn matmul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(o, false)
    }

    /// `self · oᵀ` over the last two dimensions of `o`.
    pub fn matmul_t(self, o: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(o, true)
    }

    fn matmul_impl(self, o: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(o);
        let v = matmul_values(&self.value(), &o.value(), trans_b)?;
        let rg = self.requires_grad() || o.requires_grad();
        Ok(self.tape.push(v, Op::MatMul { a: self.id, b: o.id, trans_b }, rg))
    }

    /// Rows of this `[V, d]` table selected by `ids`, as `[ids.len(), d]`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        if t.rank() != 2 {
            return shape_err(format!("gather_rows needs a [V,d] table, got {:?}", t.shape()));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return shape_err("gather_rows with no ids");
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return shape_err(format!("row {id} out of range for table of {v} rows"));
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        Ok(self.unary(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Gather { table: self.id, ids: ids.to_vec() },
        ))
    }

    /// For `[.., C]` input, picks element `idx[r]` of every row `r`,
    /// returning the leading shape.
    pub fn pick_last(self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| Error::Shape("pick_last on a scalar".into()))?;
        let rows = x.numel() / c;
        if idx.len() != rows {
            return shape_err(format!("pick_last: {} indices for {rows} rows", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return shape_err(format!("pick_last: index {bad} out of range for {c} classes"));
        }
        let data = idx.iter().enumerate().map(|(r, &i)| x.data()[r * c + i]).collect();
        let shape = x.shape()[..x.rank() - 1].to_vec();
        let shape = if shape.is_empty() { vec![] } else { shape };
        Ok(self.unary(Tensor::from_parts(shape, data), Op::Pick { x: self.id, idx: idx.to_vec() }))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias` of
    /// shape `[d]`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return shape_err(format!("layer_norm affine params must be [{d}]"));
        }
        let (gv, bv) = (gain.value(), bias.value());
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
                rstd,
            },
            rg,
        ))
    }

    /// L2-normalizes along the last axis.
    pub fn l2_normalize(self, eps: f64) -> Result<Var<'t>> {
        let last = self.value().rank().checked_sub(1).ok_or_else(|| Error::Shape("l2_normalize on a scalar".into()))?;
        let norm = self.mul(self)?.sum(last, true)?.add_scalar(eps).sqrt();
        self.div(norm)
    }
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

fn softmax_values(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * n + a) * inner + i;
            let mx = (0..n).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|a| (d[at(a)] - mx).exp()).sum();
            let lz = z.ln();
            for a in 0..n {
                out[at(a)] = if log { d[at(a)] - mx - lz } else { (d[at(a)] - mx).exp() / z };
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(a.matmul(i).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([3]));
        let s = x.softmax(0).unwrap().value();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_of_squares() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.mul(x).unwrap().sum_all();
        assert_eq!(y.item(), 14.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn linear_map_gradient() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 2]));
        let w = tape.param(t(&[2, 2], &[0.3, -1.0, 2.0, 0.5]));
        let y = x.matmul(w).unwrap().sum_all();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 4]);
        assert!(g.get(x).is_none(), "constants never receive gradients");
    }

    #[test]
    fn root_gradient_is_one_and_non_scalar_root_errors() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
        let s = x.sum_all();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(s).unwrap().item(), 1.0);
    }

    #[test]
    fn shape_errors_are_descriptive() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("inner dimensions"), "{err}");
        assert!(matches!(a.sum(2, false), Err(Error::Axis { axis: 2, rank: 2 })));
        assert!(a.add(tape.constant(Tensor::zeros([4]))).is_err());
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = x.masked_fill(&[false, true], &[2], 0.0).unwrap().sum_all();
        assert_eq!(y.item(), 4.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.slice(1, 1, 3).unwrap().value().data(), b.value().data());
    }
}
