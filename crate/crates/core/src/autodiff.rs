//! Reverse-mode automatic differentiation on a growable tape.
//!
//! Every primitive's pullback is written once, generically over a [`Backend`],
//! using only primitives of the same catalog. Running the pullbacks with the
//! numeric backend yields plain tensors (first order). Running them with the
//! symbolic backend records the backward pass as new tape nodes, so the
//! returned gradients can themselves be differentiated. That is how gradients
//! flow through unrolled SGD steps without ever forming a Hessian.
//!
//! A [`Tape`] and its [`Var`]s are single-threaded (`Rc` payloads).

use alloc::rc::Rc;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};

use rand::Rng;

use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("objective must be scalar, got shape {0:?}")]
    NonScalarObjective(Vec<usize>),
    #[error("non-finite value in backward pass of `{op}`")]
    NonFiniteGradient { op: &'static str },
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidDropoutRate(f64),
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

/// A constant sparse operator together with its adjoint.
#[derive(Clone, Debug)]
pub struct SparseOperand {
    forward: Arc<CsrMatrix>,
    adjoint: Arc<CsrMatrix>,
}

impl SparseOperand {
    pub fn new(matrix: CsrMatrix) -> Self {
        let adjoint = Arc::new(matrix.transpose());
        Self { forward: Arc::new(matrix), adjoint }
    }

    /// For symmetric matrices the adjoint shares storage with the operator.
    pub fn symmetric(matrix: Arc<CsrMatrix>) -> Self {
        Self { forward: matrix.clone(), adjoint: matrix }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.forward
    }

    fn adjoint(&self) -> Self {
        Self { forward: self.adjoint.clone(), adjoint: self.forward.clone() }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    SpMM(SparseOperand, usize),
    SelectRows(usize, Arc<[usize]>),
    ScatterRows(usize, Arc<[usize]>),
    ConcatRows(usize, usize),
    MaskMul(usize, Rc<Tensor>),
    Relu(usize),
    Exp(usize),
    Square(usize),
    Sum(usize),
    Expand(usize),
    LogSumExpRows(usize),
    AddRowBroadcast(usize, usize),
    SumRows(usize),
    BroadcastRows(usize),
    SumCols(usize),
    BroadcastCols(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::SpMM(..) => "spmm",
            Op::SelectRows(..) => "select_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::MaskMul(..) => "mask_mul",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Expand(..) => "expand",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::AddRowBroadcast(..) => "add_row_broadcast",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastCols(..) => "broadcast_cols",
        }
    }

    fn parents(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf { .. } => [None, None],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::ConcatRows(a, b)
            | Op::AddRowBroadcast(a, b) => [Some(a), Some(b)],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SpMM(_, a)
            | Op::SelectRows(a, _)
            | Op::ScatterRows(a, _)
            | Op::MaskMul(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Expand(a)
            | Op::LogSumExpRows(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a)
            | Op::SumCols(a)
            | Op::BroadcastCols(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Arena holding every value computed during one differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    higher_order_calls: Cell<usize>,
    gradient_calls: Cell<usize>,
    fault: Cell<Option<(&'static str, f64)>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("value", &*self.value()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// How many `gradient` calls ran with higher-order recording.
    pub fn higher_order_calls(&self) -> usize {
        self.higher_order_calls.get()
    }

    pub fn gradient_calls(&self) -> usize {
        self.gradient_calls.get()
    }

    /// Scales every pullback of the named primitive by `factor`, producing a
    /// deliberately wrong derivative. Used to check that gradient checks catch
    /// broken rules.
    #[doc(hidden)]
    pub fn inject_fault(&self, op: &'static str, factor: f64) {
        self.fault.set(Some((op, factor)));
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf { param: true })
    }

    /// A leaf that is never differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf { param: false })
    }

    fn push(&self, value: Rc<Tensor>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn op_of(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradient of a scalar `objective` with respect to each entry of `wrt`.
    ///
    /// With `higher_order` set the returned variables carry full provenance
    /// and can be differentiated again; otherwise they are constants.
    /// Entries of `wrt` that `objective` does not depend on get zeros.
    pub fn gradient<'t>(
        &'t self,
        objective: Var<'t>,
        wrt: &[Var<'t>],
        higher_order: bool,
    ) -> Result<Vec<Var<'t>>, AutodiffError> {
        if !core::ptr::eq(objective.tape, self) || wrt.iter().any(|w| !core::ptr::eq(w.tape, self)) {
            return Err(AutodiffError::ForeignVar);
        }
        let obj_value = objective.value();
        if obj_value.len() != 1 {
            return Err(AutodiffError::NonScalarObjective(obj_value.shape().to_vec()));
        }
        self.gradient_calls.set(self.gradient_calls.get() + 1);
        let wrt_ids: Vec<usize> = wrt.iter().map(|w| w.id).collect();
        let out = if higher_order {
            self.higher_order_calls.set(self.higher_order_calls.get() + 1);
            let backend = Symbolic { tape: self };
            let seed = self.constant(Tensor::ones(obj_value.shape()));
            backward(&backend, self, objective.id, seed, &wrt_ids)?
        } else {
            let backend = Numeric { tape: self };
            let seed = Rc::new(Tensor::ones(obj_value.shape()));
            backward(&backend, self, objective.id, seed, &wrt_ids)?
                .into_iter()
                .map(|g| self.push(g, Op::Leaf { param: false }))
                .collect()
        };
        Ok(out)
    }
}

/// Primitive set the pullbacks are written against.
trait Backend {
    type V: Clone;
    fn node(&self, id: usize) -> Self::V;
    fn zeros(&self, shape: &[usize]) -> Self::V;
    fn value(&self, v: &Self::V) -> Rc<Tensor>;
    fn add(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn scale(&self, a: &Self::V, c: f64) -> Self::V;
    fn matmul(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn transpose(&self, a: &Self::V) -> Self::V;
    fn spmm(&self, s: &SparseOperand, a: &Self::V) -> Self::V;
    fn select_rows(&self, a: &Self::V, idx: &Arc<[usize]>) -> Self::V;
    fn scatter_rows(&self, a: &Self::V, idx: &Arc<[usize]>, rows: usize) -> Self::V;
    fn mask_mul(&self, a: &Self::V, mask: Rc<Tensor>) -> Self::V;
    fn exp(&self, a: &Self::V) -> Self::V;
    fn sub(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sum(&self, a: &Self::V) -> Self::V;
    fn expand(&self, a: &Self::V, shape: &Arc<[usize]>) -> Self::V;
    fn sum_rows(&self, a: &Self::V) -> Self::V;
    fn broadcast_rows(&self, a: &Self::V, n: usize) -> Self::V;
    fn sum_cols(&self, a: &Self::V) -> Self::V;
    fn broadcast_cols(&self, a: &Self::V, m: usize) -> Self::V;
}

struct Numeric<'t> {
    tape: &'t Tape,
}

impl Backend for Numeric<'_> {
    type V = Rc<Tensor>;
    fn node(&self, id: usize) -> Self::V {
        self.tape.value_of(id)
    }
    fn zeros(&self, shape: &[usize]) -> Self::V {
        Rc::new(Tensor::zeros(shape))
    }
    fn value(&self, v: &Self::V) -> Rc<Tensor> {
        v.clone()
    }
    fn add(&self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.add(b))
    }
    fn mul(&self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.mul(b))
    }
    fn scale(&self, a: &Self::V, c: f64) -> Self::V {
        Rc::new(a.scale(c))
    }
    fn matmul(&self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.matmul(b))
    }
    fn transpose(&self, a: &Self::V) -> Self::V {
        Rc::new(a.transpose())
    }
    fn spmm(&self, s: &SparseOperand, a: &Self::V) -> Self::V {
        Rc::new(s.forward.matmul_dense(a))
    }
    fn select_rows(&self, a: &Self::V, idx: &Arc<[usize]>) -> Self::V {
        Rc::new(a.select_rows(idx))
    }
    fn scatter_rows(&self, a: &Self::V, idx: &Arc<[usize]>, rows: usize) -> Self::V {
        Rc::new(a.scatter_rows(idx, rows))
    }
    fn mask_mul(&self, a: &Self::V, mask: Rc<Tensor>) -> Self::V {
        Rc::new(a.mul(&mask))
    }
    fn exp(&self, a: &Self::V) -> Self::V {
        Rc::new(a.map(libm::exp))
    }
    fn sub(&self, a: &Self::V, b: &Self::V) -> Self::V {
        Rc::new(a.sub(b))
    }
    fn sum(&self, a: &Self::V) -> Self::V {
        Rc::new(Tensor::scalar(a.sum()))
    }
    fn expand(&self, a: &Self::V, shape: &Arc<[usize]>) -> Self::V {
        Rc::new(Tensor::full(shape, a.item()))
    }
    fn sum_rows(&self, a: &Self::V) -> Self::V {
        Rc::new(a.sum_rows())
    }
    fn broadcast_rows(&self, a: &Self::V, n: usize) -> Self::V {
        Rc::new(a.broadcast_rows(n))
    }
    fn sum_cols(&self, a: &Self::V) -> Self::V {
        Rc::new(a.sum_cols())
    }
    fn broadcast_cols(&self, a: &Self::V, m: usize) -> Self::V {
        Rc::new(a.broadcast_cols(m))
    }
}

struct Symbolic<'t> {
    tape: &'t Tape,
}

impl<'t> Backend for Symbolic<'t> {
    type V = Var<'t>;
    fn node(&self, id: usize) -> Self::V {
        self.tape.var(id)
    }
    fn zeros(&self, shape: &[usize]) -> Self::V {
        self.tape.constant(Tensor::zeros(shape))
    }
    fn value(&self, v: &Self::V) -> Rc<Tensor> {
        v.value()
    }
    fn add(&self, a: &Self::V, b: &Self::V) -> Self::V {
        a.add(*b)
    }
    fn mul(&self, a: &Self::V, b: &Self::V) -> Self::V {
        a.mul(*b)
    }
    fn scale(&self, a: &Self::V, c: f64) -> Self::V {
        a.scale(c)
    }
    fn matmul(&self, a: &Self::V, b: &Self::V) -> Self::V {
        a.matmul(*b)
    }
    fn transpose(&self, a: &Self::V) -> Self::V {
        a.transpose()
    }
    fn spmm(&self, s: &SparseOperand, a: &Self::V) -> Self::V {
        a.spmm_left(s)
    }
    fn select_rows(&self, a: &Self::V, idx: &Arc<[usize]>) -> Self::V {
        a.select_rows_shared(idx.clone())
    }
    fn scatter_rows(&self, a: &Self::V, idx: &Arc<[usize]>, rows: usize) -> Self::V {
        a.scatter_rows_shared(idx.clone(), rows)
    }
    fn mask_mul(&self, a: &Self::V, mask: Rc<Tensor>) -> Self::V {
        a.mask_mul_shared(mask)
    }
    fn exp(&self, a: &Self::V) -> Self::V {
        a.exp()
    }
    fn sub(&self, a: &Self::V, b: &Self::V) -> Self::V {
        a.sub(*b)
    }
    fn sum(&self, a: &Self::V) -> Self::V {
        a.sum()
    }
    fn expand(&self, a: &Self::V, shape: &Arc<[usize]>) -> Self::V {
        a.expand(shape)
    }
    fn sum_rows(&self, a: &Self::V) -> Self::V {
        a.sum_rows()
    }
    fn broadcast_rows(&self, a: &Self::V, n: usize) -> Self::V {
        a.broadcast_rows(n)
    }
    fn sum_cols(&self, a: &Self::V) -> Self::V {
        a.sum_cols()
    }
    fn broadcast_cols(&self, a: &Self::V, m: usize) -> Self::V {
        a.broadcast_cols(m)
    }
}

type Contributions<V> = [Option<(usize, V)>; 2];

/// Vector-Jacobian product of one node: `g` is the adjoint of node `id`.
fn pullback<B: Backend>(b: &B, tape: &Tape, id: usize, op: &Op, g: &B::V) -> Contributions<B::V> {
    let one = |p: usize, v: B::V| [Some((p, v)), None];
    match op {
        Op::Leaf { .. } => [None, None],
        Op::Add(x, y) => [Some((*x, g.clone())), Some((*y, g.clone()))],
        Op::Sub(x, y) => [Some((*x, g.clone())), Some((*y, b.scale(g, -1.0)))],
        Op::Mul(x, y) => {
            let gx = b.mul(g, &b.node(*y));
            let gy = b.mul(g, &b.node(*x));
            [Some((*x, gx)), Some((*y, gy))]
        }
        Op::Scale(x, c) => one(*x, b.scale(g, *c)),
        Op::MatMul(x, y) => {
            let gx = b.matmul(g, &b.transpose(&b.node(*y)));
            let gy = b.matmul(&b.transpose(&b.node(*x)), g);
            [Some((*x, gx)), Some((*y, gy))]
        }
        Op::Transpose(x) => one(*x, b.transpose(g)),
        Op::SpMM(s, x) => one(*x, b.spmm(&s.adjoint(), g)),
        Op::SelectRows(x, idx) => {
            let rows = tape.value_of(*x).rows();
            one(*x, b.scatter_rows(g, idx, rows))
        }
        Op::ScatterRows(x, idx) => one(*x, b.select_rows(g, idx)),
        Op::ConcatRows(x, y) => {
            let nx = tape.value_of(*x).rows();
            let ny = tape.value_of(*y).rows();
            let top: Arc<[usize]> = (0..nx).collect();
            let bottom: Arc<[usize]> = (nx..nx + ny).collect();
            [Some((*x, b.select_rows(g, &top))), Some((*y, b.select_rows(g, &bottom)))]
        }
        Op::MaskMul(x, mask) => one(*x, b.mask_mul(g, mask.clone())),
        // relu'' vanishes almost everywhere, so the step mask is a constant.
        Op::Relu(x) => {
            let mask = tape.value_of(*x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            one(*x, b.mask_mul(g, Rc::new(mask)))
        }
        Op::Exp(x) => one(*x, b.mul(g, &b.node(id))),
        Op::Square(x) => one(*x, b.scale(&b.mul(g, &b.node(*x)), 2.0)),
        Op::Sum(x) => {
            let shape: Arc<[usize]> = tape.value_of(*x).shape().into();
            one(*x, b.expand(g, &shape))
        }
        Op::Expand(x) => one(*x, b.sum(g)),
        Op::LogSumExpRows(x) => {
            let cols = tape.value_of(*x).cols();
            let shifted = b.sub(&b.node(*x), &b.broadcast_cols(&b.node(id), cols));
            let softmax = b.exp(&shifted);
            one(*x, b.mul(&b.broadcast_cols(g, cols), &softmax))
        }
        Op::AddRowBroadcast(x, bias) => [Some((*x, g.clone())), Some((*bias, b.sum_rows(g)))],
        Op::SumRows(x) => {
            let rows = tape.value_of(*x).rows();
            one(*x, b.broadcast_rows(g, rows))
        }
        Op::BroadcastRows(x) => one(*x, b.sum_rows(g)),
        Op::SumCols(x) => {
            let cols = tape.value_of(*x).cols();
            one(*x, b.broadcast_cols(g, cols))
        }
        Op::BroadcastCols(x) => one(*x, b.sum_cols(g)),
    }
}

fn backward<B: Backend>(
    b: &B,
    tape: &Tape,
    objective: usize,
    seed: B::V,
    wrt: &[usize],
) -> Result<Vec<B::V>, AutodiffError> {
    let n = objective + 1;
    let ops: Vec<Op> = {
        let nodes = tape.nodes.borrow();
        nodes[..n].iter().map(|node| node.op.clone()).collect()
    };
    // Only nodes downstream of some `wrt` entry need adjoints.
    let mut depends = vec![false; n];
    for &w in wrt {
        if w < n {
            depends[w] = true;
        }
    }
    for id in 0..n {
        if !depends[id] {
            depends[id] = ops[id].parents().iter().flatten().any(|&p| depends[p]);
        }
    }
    let fault = tape.fault.get();
    let mut adjoint: Vec<Option<B::V>> = vec![None; n];
    adjoint[objective] = Some(seed);
    for id in (0..n).rev() {
        if !depends[id] || matches!(ops[id], Op::Leaf { .. }) {
            continue;
        }
        // Adjoints of requested nodes are kept for the caller.
        let g = if wrt.contains(&id) { adjoint[id].clone() } else { adjoint[id].take() };
        let Some(g) = g else { continue };
        for (parent, contrib) in pullback(b, tape, id, &ops[id], &g).into_iter().flatten() {
            if !depends[parent] {
                continue;
            }
            let contrib = match fault {
                Some((name, factor)) if name == ops[id].name() => b.scale(&contrib, factor),
                _ => contrib,
            };
            if !b.value(&contrib).all_finite() {
                return Err(AutodiffError::NonFiniteGradient { op: ops[id].name() });
            }
            adjoint[parent] = Some(match adjoint[parent].take() {
                None => contrib,
                Some(prev) => b.add(&prev, &contrib),
            });
        }
    }
    Ok(wrt
        .iter()
        .map(|&w| match adjoint.get(w).cloned().flatten() {
            Some(g) => g,
            None => b.zeros(tape.value_of(w).shape()),
        })
        .collect())
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
        self.value().shape().to_vec()
    }

    /// Whether this node is a leaf (parameter or constant).
    pub fn is_leaf(&self) -> bool {
        matches!(self.tape.op_of(self.id), Op::Leaf { .. })
    }

    pub fn is_param(&self) -> bool {
        matches!(self.tape.op_of(self.id), Op::Leaf { param: true })
    }

    #[track_caller]
    fn same_tape(&self, other: &Var<'t>) {
        assert!(core::ptr::eq(self.tape, other.tape), "variables from different tapes");
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(Rc::new(value), op)
    }

    /// Same payload, no provenance: gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push(self.value(), Op::Leaf { param: false })
    }

    #[track_caller]
    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.unary(self.value().add(&other.value()), Op::Add(self.id, other.id))
    }

    #[track_caller]
    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.unary(self.value().sub(&other.value()), Op::Sub(self.id, other.id))
    }

    #[track_caller]
    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.unary(self.value().mul(&other.value()), Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(self.value().scale(c), Op::Scale(self.id, c))
    }

    #[track_caller]
    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.unary(self.value().matmul(&other.value()), Op::MatMul(self.id, other.id))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.unary(self.value().transpose(), Op::Transpose(self.id))
    }

    /// `S · self` for a constant sparse `S`.
    #[track_caller]
    pub fn spmm_left(&self, s: &SparseOperand) -> Var<'t> {
        let v = s.forward.matmul_dense(&self.value());
        self.unary(v, Op::SpMM(s.clone(), self.id))
    }

    #[track_caller]
    pub fn select_rows(&self, idx: &[usize]) -> Var<'t> {
        self.select_rows_shared(idx.into())
    }

    fn select_rows_shared(&self, idx: Arc<[usize]>) -> Var<'t> {
        let v = self.value().select_rows(&idx);
        self.unary(v, Op::SelectRows(self.id, idx))
    }

    /// Columns `cols` of a matrix, composed as transpose/select/transpose.
    #[track_caller]
    pub fn select_cols(&self, cols: &[usize]) -> Var<'t> {
        self.transpose().select_rows(cols).transpose()
    }

    #[track_caller]
    pub fn scatter_rows(&self, idx: &[usize], rows: usize) -> Var<'t> {
        self.scatter_rows_shared(idx.into(), rows)
    }

    fn scatter_rows_shared(&self, idx: Arc<[usize]>, rows: usize) -> Var<'t> {
        let v = self.value().scatter_rows(&idx, rows);
        self.unary(v, Op::ScatterRows(self.id, idx))
    }

    #[track_caller]
    pub fn concat_rows(&self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.unary(self.value().concat_rows(&other.value()), Op::ConcatRows(self.id, other.id))
    }

    /// Elementwise product with a fixed mask, e.g. a pregenerated dropout mask.
    #[track_caller]
    pub fn dropout(&self, mask: Tensor) -> Var<'t> {
        self.mask_mul_shared(Rc::new(mask))
    }

    fn mask_mul_shared(&self, mask: Rc<Tensor>) -> Var<'t> {
        let v = self.value().mul(&mask);
        self.unary(v, Op::MaskMul(self.id, mask))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(self.value().map(|v| v.max(0.0)), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value().map(libm::exp), Op::Exp(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(self.value().map(|v| v * v), Op::Square(self.id))
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn sum(&self) -> Var<'t> {
        self.unary(Tensor::scalar(self.value().sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Broadcasts a one-element tensor to `shape`.
    #[track_caller]
    pub fn expand(&self, shape: &[usize]) -> Var<'t> {
        let v = Tensor::full(shape, self.value().item());
        self.unary(v, Op::Expand(self.id))
    }

    pub fn logsumexp_rows(&self) -> Var<'t> {
        self.unary(self.value().logsumexp_rows(), Op::LogSumExpRows(self.id))
    }

    #[track_caller]
    pub fn add_row_broadcast(&self, bias: Var<'t>) -> Var<'t> {
        self.same_tape(&bias);
        let v = self.value().add_row_broadcast(&bias.value());
        self.unary(v, Op::AddRowBroadcast(self.id, bias.id))
    }

    pub fn sum_rows(&self) -> Var<'t> {
        self.unary(self.value().sum_rows(), Op::SumRows(self.id))
    }

    pub fn broadcast_rows(&self, n: usize) -> Var<'t> {
        self.unary(self.value().broadcast_rows(n), Op::BroadcastRows(self.id))
    }

    pub fn sum_cols(&self) -> Var<'t> {
        self.unary(self.value().sum_cols(), Op::SumCols(self.id))
    }

    pub fn broadcast_cols(&self, m: usize) -> Var<'t> {
        self.unary(self.value().broadcast_cols(m), Op::BroadcastCols(self.id))
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Result<Tensor, AutodiffError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(AutodiffError::InvalidDropoutRate(rate));
    }
    let keep = 1.0 / (1.0 - rate);
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    Ok(Tensor::from_vec(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let tape = Tape::new();
        let theta = tape.param(Tensor::vector(vec![0.3, -2.0, 5.0]));
        let g = tape.gradient(theta.sum(), &[theta], false).unwrap();
        assert_eq!(g[0].value().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_hessian_is_identity_row() {
        let tape = Tape::new();
        let theta = tape.param(Tensor::vector(vec![2.0, -1.0]));
        let f = theta.square().sum().scale(0.5);
        let g = tape.gradient(f, &[theta], true).unwrap()[0];
        assert_eq!(g.value().data(), &[2.0, -1.0]);
        let v = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let hv = tape.gradient(g.mul(v).sum(), &[theta], true).unwrap()[0];
        assert_eq!(hv.value().data(), &[1.0, 0.0]);
    }

    #[test]
    fn detach_semantics() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.5, -0.5, 2.0]));
        let d = x.detach();
        assert_eq!(*d.value(), *x.value());
        assert!(d.is_leaf() && !d.is_param());
        let g = tape.gradient(d.mul(x).sum(), &[x], false).unwrap()[0];
        assert_eq!(g.value().data(), x.value().data());
        let z = tape.gradient(d.sum(), &[x], false).unwrap()[0];
        assert_eq!(z.value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn first_order_results_are_constants() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let g = tape.gradient(x.square().sum(), &[x], false).unwrap()[0];
        assert!(g.is_leaf());
        let gg = tape.gradient(g.sum(), &[x], false).unwrap()[0];
        assert_eq!(gg.value().data(), &[0.0, 0.0]);
        let g2 = tape.gradient(x.square().sum(), &[x], true).unwrap()[0];
        assert!(!g2.is_leaf());
        assert_eq!(tape.higher_order_calls(), 1);
    }

    #[test]
    fn non_scalar_objective_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(
            tape.gradient(x, &[x], false).unwrap_err(),
            AutodiffError::NonScalarObjective(vec![2])
        );
    }

    #[test]
    fn nan_in_backward_names_the_primitive() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0]));
        let huge = tape.constant(Tensor::vector(vec![f64::INFINITY]));
        let err = tape.gradient(x.mul(huge).sum(), &[x], false).unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteGradient { op: "mul" });
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, 3, vec![0.0, 1.0, 2.0]));
        let g = tape.gradient(x.logsumexp_rows().sum(), &[x], false).unwrap()[0];
        let z: f64 = [0.0f64, 1.0, 2.0].iter().map(|v| libm::exp(*v)).sum();
        let want: Vec<f64> = [0.0f64, 1.0, 2.0].iter().map(|v| libm::exp(*v) / z).collect();
        assert!(close(g.value().data(), &want, 1e-14));
    }

    #[test]
    fn dropout_mask_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = dropout_mask(&[4, 4], 0.0, &mut rng).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
        assert!(dropout_mask(&[2], 1.0, &mut rng).is_err());
        assert!(dropout_mask(&[2], -0.1, &mut rng).is_err());

        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(dropout_mask(&[50], 0.5, &mut a).unwrap(), dropout_mask(&[50], 0.5, &mut b).unwrap());

        let big = dropout_mask(&[10_000], 0.5, &mut rng).unwrap();
        let mean = big.sum() / 10_000.0;
        assert!((0.97..=1.03).contains(&mean), "mask mean {mean}");
        assert!(big.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn unreachable_wrt_gets_zeros() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.param(Tensor::matrix(2, 2, vec![1.0; 4]));
        let g = tape.gradient(x.sum(), &[x, y], true).unwrap();
        assert_eq!(g[1].value().shape(), &[2, 2]);
        assert_eq!(g[1].value().sum(), 0.0);
    }

    #[test]
    fn intermediate_and_ancestor_together() {
        // y = 3x, f = sum(y^2): df/dy = 2y, df/dx = 18x
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0]));
        let y = x.scale(3.0);
        let f = y.square().sum();
        for higher in [false, true] {
            let g = tape.gradient(f, &[y, x], higher).unwrap();
            assert_eq!(g[0].value().data(), &[6.0, -12.0]);
            assert_eq!(g[1].value().data(), &[18.0, -36.0]);
        }
    }
}
