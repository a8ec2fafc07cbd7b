//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every forward op appends one node holding its output value and the indices
//! of its inputs. [`Tape::backward`] walks the nodes from the loss back to the
//! first node, so each recorded op has its adjoint applied exactly once.
//! A tape is single-threaded; build one tape per worker.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{NumericsError, Result};
use crate::logspace::{log_sigmoid, sigmoid};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    LogSigmoid(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    GatherRows(usize, Arc<[usize]>),
    Pick(usize, Arc<[usize]>),
    ConcatRows(Vec<usize>),
    Sum(usize),
    Mean(usize),
    Minimum(usize, usize),
    Clamp(usize, f64, f64),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("tape", &self.tape.id)
            .field("idx", &self.idx)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf. Sharing the `Arc` avoids copying parameter arrays.
    pub fn param(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, false)
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn value_of(&self, idx: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[idx].value)
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    /// Replays adjoints from a scalar loss.
    ///
    /// The loss must have shape `[1]` and belong to this tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if loss.tape.id != self.id {
            return Err(NumericsError::Usage(
                "loss was not recorded on this tape".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if !nodes[loss.idx].value.is_scalar() {
            return Err(NumericsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.idx).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut grads[idx] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn propagate(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[i];
    let rg = |j: usize| nodes[j].requires_grad;
    let val = |j: usize| &*nodes[j].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2();
            let (_, n) = val(*b).dims2();
            if rg(*a) {
                let mut da = vec![0.0; m * k];
                matmul_nt_acc(g.data(), val(*b).data(), &mut da, m, n, k);
                accumulate(grads, *a, Tensor::matrix(m, k, da));
            }
            if rg(*b) {
                let mut db = vec![0.0; k * n];
                matmul_tn_acc(val(*a).data(), g.data(), &mut db, m, k, n);
                accumulate(grads, *b, Tensor::matrix(k, n, db));
            }
        }
        Op::MatMulNt(a, b) => {
            // out = a b^T, a: [m,k], b: [n,k]
            let (m, k) = val(*a).dims2();
            let (n, _) = val(*b).dims2();
            if rg(*a) {
                let mut da = vec![0.0; m * k];
                matmul_acc(g.data(), val(*b).data(), &mut da, m, n, k);
                accumulate(grads, *a, Tensor::matrix(m, k, da));
            }
            if rg(*b) {
                let mut db = vec![0.0; n * k];
                matmul_tn_acc(g.data(), val(*a).data(), &mut db, m, n, k);
                accumulate(grads, *b, Tensor::matrix(n, k, db));
            }
        }
        Op::Add(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, reshape_like(g, val(*a)));
            }
            if rg(*b) {
                accumulate(grads, *b, reshape_like(g, val(*b)));
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, reshape_like(g, val(*a)));
            }
            if rg(*b) {
                let neg = map(g, |v| -v);
                accumulate(grads, *b, reshape_like(&neg, val(*b)));
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let d = zip(g, val(*b), |gv, bv| gv * bv);
                accumulate(grads, *a, reshape_like(&d, val(*a)));
            }
            if rg(*b) {
                let d = zip(g, val(*a), |gv, av| gv * av);
                accumulate(grads, *b, reshape_like(&d, val(*b)));
            }
        }
        Op::AddRow(x, bias) => {
            if rg(*x) {
                accumulate(grads, *x, g.clone());
            }
            if rg(*bias) {
                let (r, c) = g.dims2();
                let mut db = vec![0.0; c];
                for row in 0..r {
                    for (d, v) in db.iter_mut().zip(g.row(row)) {
                        *d += v;
                    }
                }
                accumulate(grads, *bias, reshape_like(&Tensor::vector(db), val(*bias)));
            }
        }
        Op::Scale(x, c) => {
            if rg(*x) {
                accumulate(grads, *x, map(g, |v| v * c));
            }
        }
        Op::AddScalar(x) => {
            if rg(*x) {
                accumulate(grads, *x, g.clone());
            }
        }
        Op::Tanh(x) => {
            if rg(*x) {
                let d = zip(g, &node.value, |gv, y| gv * (1.0 - y * y));
                accumulate(grads, *x, d);
            }
        }
        Op::Exp(x) => {
            if rg(*x) {
                accumulate(grads, *x, zip(g, &node.value, |gv, y| gv * y));
            }
        }
        Op::Ln(x) => {
            if rg(*x) {
                accumulate(grads, *x, zip(g, val(*x), |gv, xv| gv / xv));
            }
        }
        Op::LogSigmoid(x) => {
            if rg(*x) {
                // d/dx log sigma(x) = sigma(-x)
                accumulate(grads, *x, zip(g, val(*x), |gv, xv| gv * sigmoid(-xv)));
            }
        }
        Op::SoftmaxRows(x) => {
            if rg(*x) {
                let y = &node.value;
                let (r, c) = y.dims2();
                let mut d = vec![0.0; r * c];
                for row in 0..r {
                    let yr = y.row(row);
                    let gr = g.row(row);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[row * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
        }
        Op::LogSoftmaxRows(x) => {
            if rg(*x) {
                let y = &node.value;
                let (r, c) = y.dims2();
                let mut d = vec![0.0; r * c];
                for row in 0..r {
                    let yr = y.row(row);
                    let gr = g.row(row);
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        d[row * c + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
        }
        Op::GatherRows(table, idx) => {
            if rg(*table) {
                let (rows, c) = val(*table).dims2();
                let mut d = vec![0.0; rows * c];
                for (k, &src) in idx.iter().enumerate() {
                    let gr = g.row(k);
                    for j in 0..c {
                        d[src * c + j] += gr[j];
                    }
                }
                let t = Tensor::new(val(*table).shape().to_vec(), d).unwrap();
                accumulate(grads, *table, t);
            }
        }
        Op::Pick(x, idx) => {
            if rg(*x) {
                let (r, c) = val(*x).dims2();
                let mut d = vec![0.0; r * c];
                for (row, &col) in idx.iter().enumerate() {
                    d[row * c + col] = g.data()[row];
                }
                accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), d).unwrap());
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (r, c) = val(p).dims2();
                if rg(p) {
                    let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                    accumulate(grads, p, Tensor::new(val(p).shape().to_vec(), slice).unwrap());
                }
                offset += r;
            }
        }
        Op::Sum(x) => {
            if rg(*x) {
                accumulate(grads, *x, Tensor::filled(val(*x).shape(), g.item()));
            }
        }
        Op::Mean(x) => {
            if rg(*x) {
                let n = val(*x).numel() as f64;
                accumulate(grads, *x, Tensor::filled(val(*x).shape(), g.item() / n));
            }
        }
        Op::Minimum(a, b) => {
            // ties route the adjoint to the first operand
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(gv, (x, y))| if x <= y { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
            }
            if rg(*b) {
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(gv, (x, y))| if x <= y { 0.0 } else { *gv })
                    .collect();
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d).unwrap());
            }
        }
        Op::Clamp(x, lo, hi) => {
            if rg(*x) {
                let d = zip(g, val(*x), |gv, xv| if xv < *lo || xv > *hi { 0.0 } else { gv });
                accumulate(grads, *x, d);
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn reshape_like(g: &Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        g.clone()
    } else {
        Tensor::new(like.shape().to_vec(), g.data().to_vec()).unwrap()
    }
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when `var` does not
    /// require grad or is unreachable from the loss.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        if var.tape.id != self.tape_id {
            return None;
        }
        self.grads.get(var.idx).and_then(|g| g.as_ref())
    }
}

fn check_same_numel(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.numel(),
        b.numel(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    zip(a, b, f)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.idx)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.idx)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert_eq!(self.tape.id, other.tape.id, "vars from different tapes");
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(Arc::new(value), op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        self.same_tape(other);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(Arc::new(value), op, rg)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![0.0; m * n];
        matmul_acc(a.data(), b.data(), &mut out, m, k, n);
        self.binary(other, Tensor::matrix(m, n, out), Op::MatMul(self.idx, other.idx))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2();
        let (n, k2) = b.dims2();
        assert_eq!(k, k2, "matmul_nt inner dims {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(a.data(), b.data(), &mut out, m, k, n);
        self.binary(other, Tensor::matrix(m, n, out), Op::MatMulNt(self.idx, other.idx))
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        check_same_numel("add", &a, &b);
        let v = elementwise(&a, &b, |x, y| x + y);
        self.binary(other, v, Op::Add(self.idx, other.idx))
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        check_same_numel("sub", &a, &b);
        let v = elementwise(&a, &b, |x, y| x - y);
        self.binary(other, v, Op::Sub(self.idx, other.idx))
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        check_same_numel("mul", &a, &b);
        let v = elementwise(&a, &b, |x, y| x * y);
        self.binary(other, v, Op::Mul(self.idx, other.idx))
    }

    /// Adds a `[n]` bias to every row of `[m,n]`.
    pub fn add_row(&self, bias: &Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let (r, c) = x.dims2();
        assert_eq!(b.numel(), c, "add_row bias width");
        let mut out = x.data().to_vec();
        for row in 0..r {
            for (o, bv) in out[row * c..(row + 1) * c].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out).unwrap();
        self.binary(bias, v, Op::AddRow(self.idx, bias.idx))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = map(&self.value(), |x| x * c);
        self.unary(v, Op::Scale(self.idx, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = map(&self.value(), |x| x + c);
        self.unary(v, Op::AddScalar(self.idx))
    }

    pub fn tanh(&self) -> Var<'t> {
        let v = map(&self.value(), f64::tanh);
        self.unary(v, Op::Tanh(self.idx))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = map(&self.value(), f64::exp);
        self.unary(v, Op::Exp(self.idx))
    }

    /// Natural log; callers guarantee strictly positive input.
    pub fn ln(&self) -> Var<'t> {
        let v = map(&self.value(), f64::ln);
        self.unary(v, Op::Ln(self.idx))
    }

    pub fn log_sigmoid(&self) -> Var<'t> {
        let v = map(&self.value(), log_sigmoid);
        self.unary(v, Op::LogSigmoid(self.idx))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked
    /// with negative infinity before normalization.
    pub fn softmax_rows(&self, causal: bool) -> Var<'t> {
        let x = self.value();
        let (r, c) = x.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let limit = if causal { (i + 1).min(c) } else { c };
            let max = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..limit {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..limit {
                out[i * c + j] /= z;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out).unwrap();
        self.unary(v, Op::SoftmaxRows(self.idx))
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        let x = self.value();
        let (r, c) = x.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out).unwrap();
        self.unary(v, Op::LogSoftmaxRows(self.idx))
    }

    /// Selects rows of a `[V,d]` table, producing `[indices.len(), d]`.
    pub fn gather_rows(&self, indices: &[usize]) -> Var<'t> {
        let t = self.value();
        let (rows, c) = t.dims2();
        assert!(!indices.is_empty(), "gather_rows with no indices");
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            assert!(i < rows, "gather_rows index {i} out of {rows}");
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::matrix(indices.len(), c, out);
        self.unary(v, Op::GatherRows(self.idx, indices.into()))
    }

    /// Picks one column per row of `[m,n]`, producing `[m]`.
    pub fn pick(&self, cols: &[usize]) -> Var<'t> {
        let x = self.value();
        let (r, c) = x.dims2();
        assert_eq!(cols.len(), r, "pick needs one column per row");
        let out: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "pick column {j} out of {c}");
                x.at(i, j)
            })
            .collect();
        self.unary(Tensor::vector(out), Op::Pick(self.idx, cols.into()))
    }

    /// Stacks row blocks with equal widths.
    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let c = parts[0].value().dims2().1;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for p in parts {
            p.same_tape(&parts[0]);
            let v = p.value();
            let (r, pc) = v.dims2();
            assert_eq!(pc, c, "concat_rows width mismatch");
            rows += r;
            out.extend_from_slice(v.data());
            rg |= p.requires_grad();
        }
        let op = Op::ConcatRows(parts.iter().map(|p| p.idx).collect());
        tape.push(Arc::new(Tensor::matrix(rows, c, out)), op, rg)
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.idx))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let m = v.sum() / v.numel() as f64;
        self.unary(Tensor::scalar(m), Op::Mean(self.idx))
    }

    pub fn minimum(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        check_same_numel("minimum", &a, &b);
        let v = elementwise(&a, &b, |x, y| if x <= y { x } else { y });
        self.binary(other, v, Op::Minimum(self.idx, other.idx))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let v = map(&self.value(), |x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp(self.idx, lo, hi))
    }
}
