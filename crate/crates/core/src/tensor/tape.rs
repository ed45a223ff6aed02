use std::cell::RefCell;
use std::fmt;

use super::gemm::{gemm, View};
use super::recurrent::{self, GruCache, GruDims};
use super::{Tensor, TensorError, MASK_SENTINEL};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Log,
    Exp,
    Sqrt,
    Square,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        batch: usize,
    },
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
    },
    Unary {
        kind: Unary,
        x: usize,
    },
    Softmax {
        x: usize,
    },
    LogSoftmax {
        x: usize,
    },
    Sum {
        x: usize,
    },
    SumAxis {
        x: usize,
    },
    FrobeniusSq {
        x: usize,
    },
    Trace {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Transpose {
        x: usize,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ConcatRows {
        xs: Vec<usize>,
    },
    ConcatCols {
        xs: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Gru {
        xp: usize,
        u_zr: usize,
        u_n: usize,
        batch: usize,
        cache: Box<GruCache>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; parents always precede children.
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

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar with respect to every trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, or zeros of the leaf's shape when it was unreachable.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(TensorError::DimensionMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            }),
        })
        .collect()
}

/// How each flat output index reads from a broadcast input.
enum Bcast {
    Same,
    /// Input equals the output with one contiguous block of axes collapsed
    /// to 1: `(k / span) * inner + k % inner`.
    Collapse { inner: usize, span: usize },
    Map(Vec<usize>),
}

impl Bcast {
    fn plan(out: &[usize], input: &[usize]) -> Self {
        let rank = out.len();
        let mut padded = vec![1; rank - input.len()];
        padded.extend_from_slice(input);
        if padded == out {
            return Bcast::Same;
        }
        let differs: Vec<usize> = (0..rank).filter(|&d| padded[d] != out[d]).collect();
        let (lo, hi) = (differs[0], differs[differs.len() - 1] + 1);
        if padded[lo..hi].iter().all(|&d| d == 1) {
            let inner: usize = out[hi..].iter().product();
            let mid: usize = out[lo..hi].iter().product();
            return Bcast::Collapse { inner, span: mid * inner };
        }
        Bcast::Map(broadcast_map(out, &padded))
    }

    #[inline]
    fn at(&self, k: usize) -> usize {
        match self {
            Bcast::Same => k,
            Bcast::Collapse { inner, span } => (k / span) * inner + k % inner,
            Bcast::Map(m) => m[k],
        }
    }
}

/// For every flat output index, the flat index it reads from `padded`
/// (an input shape left-padded with ones to the output rank).
fn broadcast_map(out: &[usize], padded: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let len: usize = out.iter().product();
    let mut map = Vec::with_capacity(len);
    let mut idx = vec![0usize; rank];
    for _ in 0..len {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn is_masked(v: f64) -> bool {
    v <= MASK_SENTINEL * 0.5
}

fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let c = *x.shape().last().unwrap();
    let mut out = vec![0.0; x.len()];
    for (r, (src, dst)) in x.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
        if src.iter().all(|&v| is_masked(v)) {
            return Err(TensorError::FullyMaskedRow { row: r });
        }
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
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
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Reverse pass from a scalar output. Each recorded node is visited once,
    /// in reverse recording order.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

/// Dense storage views of both operands (last two axes) and their batch strides.
fn matmul_storage(nodes: &[Node], a: usize, b: usize) -> (View, View) {
    let sa = nodes[a].value.shape();
    let sb = nodes[b].value.shape();
    (
        View::dense(0, sa[sa.len() - 2], sa[sa.len() - 1]),
        View::dense(0, sb[sb.len() - 2], sb[sb.len() - 1]),
    )
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb, batch } => {
            let (sa, sb) = matmul_storage(nodes, *a, *b);
            let (a_step, b_step) = (sa.rows * sa.cols, sb.rows * sb.cols);
            let (av, bv) = (sa.maybe_t(*ta), sb.maybe_t(*tb));
            let (m, n) = (av.rows, bv.cols);
            let a_data = nodes[*a].value.data();
            let b_data = nodes[*b].value.data();
            // d op(A) = dC · op(B)ᵀ and d op(B) = op(A)ᵀ · dC, written back
            // through the transposed storage view when the operand was transposed.
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..*batch {
                    let gv = View::dense(i * m * n, m, n);
                    let bi = View { offset: i * b_step, ..bv };
                    let target = View { offset: i * a_step, ..sa }.maybe_t(*ta);
                    gemm(g, gv, b_data, bi.t(), ga, target, true);
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for i in 0..*batch {
                    let gv = View::dense(i * m * n, m, n);
                    let ai = View { offset: i * a_step, ..av };
                    let target = View { offset: i * b_step, ..sb }.maybe_t(*tb);
                    gemm(a_data, ai.t(), g, gv, gb, target, true);
                }
            }
        }
        Op::Binary { kind, a, b } => {
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            let ma = Bcast::plan(out.shape(), va.shape());
            let mb = Bcast::plan(out.shape(), vb.shape());
            let ia = |k: usize| ma.at(k);
            let ib = |k: usize| mb.at(k);
            let (da, db) = (va.data(), vb.data());
            if let Some(ga) = slot(grads, nodes, *a) {
                for (k, &gk) in g.iter().enumerate() {
                    ga[ia(k)] += match kind {
                        Binary::Add | Binary::Sub => gk,
                        Binary::Mul => gk * db[ib(k)],
                        Binary::Div => gk / db[ib(k)],
                    };
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for (k, &gk) in g.iter().enumerate() {
                    let y = db[ib(k)];
                    gb[ib(k)] += match kind {
                        Binary::Add => gk,
                        Binary::Sub => -gk,
                        Binary::Mul => gk * da[ia(k)],
                        Binary::Div => -gk * da[ia(k)] / (y * y),
                    };
                }
            }
        }
        Op::Unary { kind, x } => {
            let xin = nodes[*x].value.data();
            let y = out.data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for k in 0..g.len() {
                    gx[k] += g[k]
                        * match *kind {
                            Unary::Sigmoid => y[k] * (1.0 - y[k]),
                            Unary::Tanh => 1.0 - y[k] * y[k],
                            Unary::Relu => {
                                if xin[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Log => 1.0 / xin[k],
                            Unary::Exp => y[k],
                            Unary::Sqrt => 0.5 / y[k],
                            Unary::Square => 2.0 * xin[k],
                            Unary::Scale(c) => c,
                            Unary::AddScalar(_) => 1.0,
                            Unary::Clamp(lo, hi) => {
                                if xin[k] >= lo && xin[k] <= hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                }
            }
        }
        Op::Softmax { x } => {
            let c = *out.shape().last().unwrap();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((y, gr), dst) in out.data().chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        dst[k] += y[k] * (gr[k] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax { x } => {
            let c = *out.shape().last().unwrap();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((y, gr), dst) in out.data().chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for k in 0..c {
                        dst[k] += gr[k] - y[k].exp() * total;
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::SumAxis { x } => {
            let shape = nodes[*x].value.shape().to_vec();
            let map = Bcast::plan(&shape, out.shape());
            if let Some(gx) = slot(grads, nodes, *x) {
                for (k, v) in gx.iter_mut().enumerate() {
                    *v += g[map.at(k)];
                }
            }
        }
        Op::FrobeniusSq { x } => {
            let xin = nodes[*x].value.data();
            if let Some(gx) = slot(grads, nodes, *x) {
                for (v, &xi) in gx.iter_mut().zip(xin) {
                    *v += 2.0 * xi * g[0];
                }
            }
        }
        Op::Trace { x } => {
            let n = nodes[*x].value.rows();
            if let Some(gx) = slot(grads, nodes, *x) {
                for i in 0..n {
                    gx[i * n + i] += g[0];
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(v, gi)| *v += gi);
            }
        }
        Op::Transpose { x } => {
            let (r, c) = (nodes[*x].value.rows(), nodes[*x].value.cols());
            if let Some(gx) = slot(grads, nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            let c = nodes[*x].value.cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                for (k, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[src * c + j] += g[k * c + j];
                    }
                }
            }
        }
        Op::ConcatRows { xs } => {
            let mut offset = 0;
            for &p in xs {
                let len = nodes[p].value.len();
                if let Some(gx) = slot(grads, nodes, p) {
                    gx.iter_mut().zip(&g[offset..offset + len]).for_each(|(v, gi)| *v += gi);
                }
                offset += len;
            }
        }
        Op::ConcatCols { xs } => {
            let total = out.cols();
            let rows = out.rows();
            let mut offset = 0;
            for &p in xs {
                let c = nodes[p].value.cols();
                if let Some(gx) = slot(grads, nodes, p) {
                    for r in 0..rows {
                        for j in 0..c {
                            gx[r * c + j] += g[r * total + offset + j];
                        }
                    }
                }
                offset += c;
            }
        }
        Op::Gru {
            xp,
            u_zr,
            u_n,
            batch,
            cache,
        } => {
            let d = out.cols();
            let dims = GruDims {
                steps: out.rows() / batch,
                batch: *batch,
                d,
            };
            let gg = recurrent::backward(
                out.data(),
                cache,
                nodes[*u_zr].value.data(),
                nodes[*u_n].value.data(),
                g,
                &dims,
            );
            for (p, src) in [(*xp, gg.xp), (*u_zr, gg.u_zr), (*u_n, gg.u_n)] {
                if let Some(gx) = slot(grads, nodes, p) {
                    gx.iter_mut().zip(&src).for_each(|(v, s)| *v += s);
                }
            }
        }
        Op::SliceCols { x, start } => {
            let total = nodes[*x].value.cols();
            let c = out.cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                for r in 0..out.rows() {
                    for j in 0..c {
                        gx[r * total + start + j] += g[r * c + j];
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor, bool) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        f(&n.value, n.requires_grad)
    }

    fn unary(&self, kind: Unary, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (value, rg) = self.with(|v, rg| {
            let data = v.data().iter().map(|&x| f(x)).collect();
            (Tensor::from_parts(v.shape().to_vec(), data), rg)
        });
        self.tape.push(value, Op::Unary { kind, x: self.id }, rg)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Unary::Tanh, f64::tanh)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu, |x| x.max(0.0))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp, f64::exp)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square, |x| x * x)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Unary::Scale(c), |x| c * x)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Unary::AddScalar(c), |x| x + c)
    }

    /// `1 - x`
    pub fn one_minus(&self) -> Var<'t> {
        self.neg().add_scalar(1.0)
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Unary::Clamp(lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.with(|v, _| v.data().iter().copied().find(|&x| !(x > 0.0))) {
            return Err(TensorError::Domain { op: "log", value: bad });
        }
        Ok(self.unary(Unary::Log, f64::ln))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.with(|v, _| v.data().iter().copied().find(|&x| !(x > 0.0))) {
            return Err(TensorError::Domain { op: "sqrt", value: bad });
        }
        Ok(self.unary(Unary::Sqrt, f64::sqrt))
    }

    fn binary(&self, other: Var<'t>, kind: Binary, op: &'static str) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (na, nb) = (&nodes[self.id], &nodes[other.id]);
        let (va, vb) = (&na.value, &nb.value);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let shape = broadcast_shape(op, va.shape(), vb.shape())?;
        let data: Vec<f64> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = Bcast::plan(&shape, va.shape());
            let mb = Bcast::plan(&shape, vb.shape());
            let len: usize = shape.iter().product();
            let (da, db) = (va.data(), vb.data());
            (0..len).map(|k| f(da[ma.at(k)], db[mb.at(k)])).collect()
        };
        let rg = na.requires_grad || nb.requires_grad;
        drop(nodes);
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
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div, "div")
    }

    fn matmul_impl(&self, other: Var<'t>, ta: bool, tb: bool, op: &'static str) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (na, nb) = (&nodes[self.id], &nodes[other.id]);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        let mismatch = || TensorError::DimensionMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(mismatch());
        }
        let batch = if sa.len() == 3 {
            if sa[0] != sb[0] {
                return Err(mismatch());
            }
            sa[0]
        } else {
            1
        };
        let (sav, sbv) = matmul_storage(&nodes, self.id, other.id);
        let (a_step, b_step) = (sav.rows * sav.cols, sbv.rows * sbv.cols);
        let (av, bv) = (sav.maybe_t(ta), sbv.maybe_t(tb));
        if av.cols != bv.rows {
            return Err(mismatch());
        }
        let (m, n) = (av.rows, bv.cols);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                na.value.data(),
                View { offset: i * a_step, ..av },
                nb.value.data(),
                View { offset: i * b_step, ..bv },
                &mut out,
                View::dense(i * m * n, m, n),
                false,
            );
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = na.requires_grad || nb.requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
                batch,
            },
            rg,
        ))
    }

    /// Gated recurrent unit over a time-major input projection
    /// `[T·B × 3d]` (update, reset and candidate blocks, biases included).
    /// `u_zr` is `[d × 2d]`, `u_n` is `[d × d]`; returns the hidden states
    /// `[T·B × d]`, time-major, starting from a zero state.
    pub fn gru(&self, u_zr: Var<'t>, u_n: Var<'t>, batch: usize) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (nx, nz, nn) = (&nodes[self.id], &nodes[u_zr.id], &nodes[u_n.id]);
        let (sx, sz, sn) = (nx.value.shape(), nz.value.shape(), nn.value.shape());
        let d = sn.first().copied().unwrap_or(0);
        let ok = sx.len() == 2
            && batch > 0
            && sx[0] % batch == 0
            && sx[1] == 3 * d
            && sz == [d, 2 * d]
            && sn == [d, d];
        if !ok {
            return Err(TensorError::DimensionMismatch {
                op: "gru",
                lhs: sx.to_vec(),
                rhs: vec![d, 2 * d, d],
            });
        }
        let dims = GruDims {
            steps: sx[0] / batch,
            batch,
            d,
        };
        let (h, cache) = recurrent::forward(nx.value.data(), nz.value.data(), nn.value.data(), &dims);
        let rg = nx.requires_grad || nz.requires_grad || nn.requires_grad;
        let shape = vec![sx[0], d];
        drop(nodes);
        Ok(self.tape.push(
            Tensor::from_parts(shape, h),
            Op::Gru {
                xp: self.id,
                u_zr: u_zr.id,
                u_n: u_n.id,
                batch,
                cache: Box::new(cache),
            },
            rg,
        ))
    }

    /// Matrix product; rank-3 operands are multiplied batch-wise.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false, false, "matmul")
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false, true, "matmul_nt")
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true, false, "matmul_tn")
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (value, rg) = self.with(|v, rg| {
            if v.rank() != 2 {
                return Err(TensorError::Invalid(format!("transpose needs a matrix, got {:?}", v.shape())));
            }
            let (r, c) = (v.rows(), v.cols());
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = v.data()[i * c + j];
                }
            }
            Ok((Tensor::from_parts(vec![c, r], data), rg))
        })?;
        Ok(self.tape.push(value, Op::Transpose { x: self.id }, rg))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let (value, rg) = self.with(|v, rg| softmax_rows(v).map(|t| (t, rg)))?;
        Ok(self.tape.push(value, Op::Softmax { x: self.id }, rg))
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        let (value, rg) = self.with(|v, rg| {
            let c = *v.shape().last().unwrap();
            let mut out = v.data().to_vec();
            for row in out.chunks_mut(c) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            (Tensor::from_parts(v.shape().to_vec(), out), rg)
        });
        Ok(self.tape.push(value, Op::LogSoftmax { x: self.id }, rg))
    }

    /// Sum of every entry, shape `[1]`.
    pub fn sum(&self) -> Var<'t> {
        let (value, rg) = self.with(|v, rg| (Tensor::scalar(v.data().iter().sum()), rg));
        self.tape.push(value, Op::Sum { x: self.id }, rg)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.with(|v, _| v.len()) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let (value, rg) = self.with(|v, rg| {
            if axis >= v.rank() {
                return Err(TensorError::Invalid(format!("axis {axis} out of range for {:?}", v.shape())));
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = 1;
            let map = Bcast::plan(v.shape(), &shape);
            let mut data = vec![0.0; shape.iter().product()];
            for (k, &x) in v.data().iter().enumerate() {
                data[map.at(k)] += x;
            }
            Ok((Tensor::from_parts(shape, data), rg))
        })?;
        Ok(self.tape.push(value, Op::SumAxis { x: self.id }, rg))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let n = self.with(|v, _| v.shape().get(axis).copied().unwrap_or(1)) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    pub fn frobenius_norm_sq(&self) -> Var<'t> {
        let (value, rg) = self.with(|v, rg| (Tensor::scalar(v.data().iter().map(|x| x * x).sum()), rg));
        self.tape.push(value, Op::FrobeniusSq { x: self.id }, rg)
    }

    pub fn trace(&self) -> Result<Var<'t>> {
        let (value, rg) = self.with(|v, rg| {
            if v.rank() != 2 || v.rows() != v.cols() {
                return Err(TensorError::DimensionMismatch {
                    op: "trace",
                    lhs: v.shape().to_vec(),
                    rhs: vec![v.rows(), v.rows()],
                });
            }
            let n = v.rows();
            Ok((Tensor::scalar((0..n).map(|i| v.data()[i * n + i]).sum()), rg))
        })?;
        Ok(self.tape.push(value, Op::Trace { x: self.id }, rg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = self.with(|v, rg| v.clone().reshaped(shape).map(|t| (t, rg)))?;
        Ok(self.tape.push(value, Op::Reshape { x: self.id }, rg))
    }

    /// Rows (leading-axis slices) picked by index; repeats are allowed.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = self.with(|v, rg| {
            if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
                return Err(TensorError::Invalid(format!("row {bad} out of range for {:?}", v.shape())));
            }
            if idx.is_empty() {
                return Err(TensorError::Invalid("gather_rows with no rows".into()));
            }
            Ok((v.select_rows(idx), rg))
        })?;
        Ok(self.tape.push(
            value,
            Op::GatherRows {
                x: self.id,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(&idx)
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (value, rg) = self.with(|v, rg| {
            if v.rank() != 2 || start >= end || end > v.cols() {
                return Err(TensorError::Invalid(format!(
                    "column slice {start}..{end} invalid for {:?}",
                    v.shape()
                )));
            }
            let c = end - start;
            let mut data = Vec::with_capacity(v.rows() * c);
            for r in 0..v.rows() {
                data.extend_from_slice(&v.row(r)[start..end]);
            }
            Ok((Tensor::from_parts(vec![v.rows(), c], data), rg))
        })?;
        Ok(self.tape.push(value, Op::SliceCols { x: self.id, start }, rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?
            .tape;
        let nodes = tape.nodes.borrow();
        let first = &nodes[parts[0].id].value;
        let tail: Vec<usize> = first.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for p in parts {
            let n = &nodes[p.id];
            if n.value.shape()[1..] != tail[..] {
                return Err(TensorError::DimensionMismatch {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: n.value.shape().to_vec(),
                });
            }
            rows += n.value.rows();
            data.extend_from_slice(n.value.data());
            rg |= n.requires_grad;
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        drop(nodes);
        Ok(tape.push(
            Tensor::from_parts(shape, data),
            Op::ConcatRows {
                xs: parts.iter().map(|p| p.id).collect(),
            },
            rg,
        ))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?
            .tape;
        let nodes = tape.nodes.borrow();
        let rows = nodes[parts[0].id].value.rows();
        let mut total = 0;
        let mut rg = false;
        for p in parts {
            let v = &nodes[p.id].value;
            if v.rank() != 2 || v.rows() != rows {
                return Err(TensorError::DimensionMismatch {
                    op: "concat_cols",
                    lhs: nodes[parts[0].id].value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            total += v.cols();
            rg |= nodes[p.id].requires_grad;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(nodes[p.id].value.row(r));
            }
        }
        drop(nodes);
        Ok(tape.push(
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols {
                xs: parts.iter().map(|p| p.id).collect(),
            },
            rg,
        ))
    }
}
